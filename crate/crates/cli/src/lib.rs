//! Command-line front end: `register`, `warp`, `metrics`, `gridviz` and `demo`.
//!
//! Exit codes: 0 success, 2 bad flags or configuration, 3 unreadable or
//! malformed inputs, 4 numerical divergence.

pub mod render;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use flowreg::adjoint::GradientMode;
use flowreg::fixtures::{brain_slice_labels, DemoPair};
use flowreg::flow::{FlowConfig, Retention, Scheme};
use flowreg::io;
use flowreg::metrics::{dice, foreground_labels, neg_jacobian_ratio};
use flowreg::objective::{LossConfig, Similarity};
use flowreg::optim::{register_with, FieldType, OptimConfig, RegistrationConfig};
use flowreg::{jacobian_det_map, warp, warp_labels, Error, LabelMap, NeuralFieldSpec, TimeMode, VoxelCloud};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "flowreg", version, about = "Diffeomorphic image registration on voxel clouds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Apply a saved deformation field to an image or label map.
    Warp(WarpArgs),
    /// Dice overlap and folding ratio of saved artifacts.
    Metrics(MetricsArgs),
    /// Render a deformation field as a warped lattice.
    Gridviz(GridvizArgs),
    /// Write one of the built-in 64x64 demo pairs.
    Demo(DemoArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimArg {
    Ncc,
    Mse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldArg {
    Neural,
    Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeModeArg {
    Autonomous,
    Injected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeArg {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientArg {
    Adjoint,
    Discrete,
}

/// Flags of `register`. Serialized as a flat map into `config.json`.
#[derive(Clone, Debug, PartialEq, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct RegisterArgs {
    /// Fixed image (.pgm or raw array).
    #[arg(long, required_unless_present = "config")]
    pub fixed: Option<PathBuf>,
    /// Moving image (.pgm or raw array).
    #[arg(long, required_unless_present = "config")]
    pub moving: Option<PathBuf>,
    /// Label map of the fixed image, for Dice in metrics.json.
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    /// Label map of the moving image; warped alongside the image.
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "ncc")]
    pub sim: SimArg,
    /// NCC window edge length, odd.
    #[arg(long, default_value_t = 21)]
    pub ncc_window: usize,
    /// Integration steps.
    #[arg(long, default_value_t = 1)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "euler")]
    pub scheme: SchemeArg,
    #[arg(long, default_value_t = 1.0)]
    pub horizon: f64,
    /// Optimizer iterations.
    #[arg(long, default_value_t = 250)]
    pub iters: usize,
    /// Adam learning rate; 1e-3 for neural and 1e-1 for tensor fields if unset.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum, default_value = "adjoint")]
    pub gradient: GradientArg,
    #[arg(long, default_value_t = 1000.0)]
    pub lambda_jdet: f64,
    #[arg(long, default_value_t = 0.01)]
    pub lambda_mag: f64,
    #[arg(long, default_value_t = 0.5)]
    pub lambda_smt: f64,
    /// Margin of the negative-Jacobian penalty.
    #[arg(long, default_value_t = 1e-3)]
    pub epsilon: f64,
    /// Gaussian smoothing radius in voxels; 0 disables smoothing.
    #[arg(long, default_value_t = 2)]
    pub kernel_radius: usize,
    #[arg(long, default_value_t = 1.0)]
    pub kernel_sigma: f64,
    #[arg(long, value_enum, default_value = "neural")]
    pub field: FieldArg,
    #[arg(long, value_enum, default_value = "injected")]
    pub time_mode: TimeModeArg,
    /// Pin every face voxel in place.
    #[arg(long)]
    pub fix_boundary: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "flowreg-out")]
    pub out_dir: PathBuf,
    /// Line spacing of grid.pgm.
    #[arg(long, default_value_t = 4)]
    pub grid_spacing: usize,
    /// Rerun from a config.json; flags given on the command line take precedence.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

impl RegisterArgs {
    pub fn registration_config(&self) -> RegistrationConfig {
        RegistrationConfig {
            field: match self.field {
                FieldArg::Neural => FieldType::Neural,
                FieldArg::Tensor => FieldType::Tensor,
            },
            network: NeuralFieldSpec::default(),
            time_mode: match self.time_mode {
                TimeModeArg::Autonomous => TimeMode::Autonomous,
                TimeModeArg::Injected => TimeMode::TimeInjected,
            },
            flow: FlowConfig {
                horizon: self.horizon,
                steps: self.steps,
                scheme: match self.scheme {
                    SchemeArg::Euler => Scheme::Euler,
                    SchemeArg::Rk4 => Scheme::Rk4,
                },
                retention: Retention::Full,
            },
            kernel_radius: self.kernel_radius,
            kernel_sigma: self.kernel_sigma,
            loss: LossConfig {
                similarity: match self.sim {
                    SimArg::Ncc => Similarity::Ncc { window: self.ncc_window },
                    SimArg::Mse => Similarity::Mse,
                },
                lambda_jdet: self.lambda_jdet,
                lambda_mag: self.lambda_mag,
                lambda_smt: self.lambda_smt,
                epsilon: self.epsilon,
                ..LossConfig::default()
            },
            optim: OptimConfig {
                iterations: self.iters,
                learning_rate: self.lr,
                gradient: match self.gradient {
                    GradientArg::Adjoint => GradientMode::Adjoint,
                    GradientArg::Discrete => GradientMode::Discrete,
                },
                seed: self.seed,
                ..OptimConfig::default()
            },
            fix_boundary: self.fix_boundary,
        }
    }
}

#[derive(Debug, Args)]
pub struct WarpArgs {
    /// Deformation field (field.raw or its stem).
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Output path; .pgm writes an 8-bit image, anything else a raw array.
    #[arg(long)]
    pub output: PathBuf,
    /// Treat the input as a label map (nearest-neighbour lookup).
    #[arg(long)]
    pub labels: bool,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("inputs").required(true).multiple(true).args(["field", "fixed_labels"]))]
pub struct MetricsArgs {
    /// Deformation field; gives the folding ratio and warps the moving labels.
    #[arg(long)]
    pub field: Option<PathBuf>,
    #[arg(long, requires = "moving_labels")]
    pub fixed_labels: Option<PathBuf>,
    #[arg(long, requires = "fixed_labels")]
    pub moving_labels: Option<PathBuf>,
    /// Labels to score; defaults to every non-zero label present.
    #[arg(long, value_delimiter = ',')]
    pub labels: Vec<u16>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GridvizArgs {
    #[arg(long)]
    pub field: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Draw every k-th lattice line.
    #[arg(long, default_value_t = 4)]
    pub spacing: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PairArg {
    DonutCircle,
    SquareCross,
    TwoBlobs,
    BrainSlice,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long, value_enum)]
    pub pair: PairArg,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

/// Contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mean_dice: Option<f64>,
    pub per_label: std::collections::BTreeMap<u16, f64>,
    pub neg_jacobian_ratio: Option<f64>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = Cli::from_arg_matches(&matches)
        .map_err(anyhow::Error::from)
        .and_then(|cli| dispatch(cli, &matches));
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli, matches: &ArgMatches) -> anyhow::Result<()> {
    match cli.command {
        Command::Register(args) => {
            let sub = matches.subcommand_matches("register").expect("register matches");
            cmd_register(&resolve_register_args(args, sub)?)
        }
        Command::Warp(args) => cmd_warp(&args),
        Command::Metrics(args) => cmd_metrics(&args),
        Command::Gridviz(args) => cmd_gridviz(&args),
        Command::Demo(args) => cmd_demo(&args),
    }
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Divergence { .. } | Error::OptimizationDiverged { .. } | Error::NonFinite(_) => EXIT_DIVERGED,
                Error::Parameter(_) | Error::Config(_) | Error::TimeOutOfRange { .. } => EXIT_USAGE,
                _ => EXIT_IO,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
        if cause.is::<clap::Error>() {
            return EXIT_USAGE;
        }
    }
    1
}

/// Merges a `--config` file under the flags given explicitly on the command line.
fn resolve_register_args(args: RegisterArgs, matches: &ArgMatches) -> anyhow::Result<RegisterArgs> {
    let Some(path) = &args.config else {
        return Ok(args);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut merged: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let serde_json::Value::Object(given) = serde_json::to_value(&args)? else {
        unreachable!("flags serialize to a map");
    };
    for (key, value) in given {
        let id = key.replace('-', "_");
        if matches.value_source(&id) == Some(ValueSource::CommandLine) {
            merged.insert(key, value);
        }
    }
    let resolved: RegisterArgs = serde_json::from_value(serde_json::Value::Object(merged))
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if resolved.fixed.is_none() || resolved.moving.is_none() {
        bail!(Error::Config("both fixed and moving images are required".into()));
    }
    Ok(resolved)
}

fn is_pgm(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_labels(path: &Path) -> anyhow::Result<LabelMap> {
    io::read_labels(path).with_context(|| format!("reading labels {}", path.display()))
}

fn metrics_report(fixed: Option<&LabelMap>, moving: Option<&LabelMap>, labels: &[u16], cloud: Option<&VoxelCloud>) -> anyhow::Result<MetricsReport> {
    let (mut mean_dice, mut per_label) = (None, Default::default());
    if let (Some(a), Some(b)) = (fixed, moving) {
        let labels = if labels.is_empty() { foreground_labels(a, b) } else { labels.to_vec() };
        if !labels.is_empty() {
            let report = dice(a, b, &labels)?;
            mean_dice = report.mean;
            per_label = report.per_label;
        }
    }
    Ok(MetricsReport {
        mean_dice,
        per_label,
        neg_jacobian_ratio: cloud.map(neg_jacobian_ratio),
    })
}

pub fn cmd_register(args: &RegisterArgs) -> anyhow::Result<()> {
    let config = args.registration_config();
    config.validate()?;
    if args.grid_spacing == 0 {
        bail!(Error::Parameter("grid spacing must be >= 1".into()));
    }
    let fixed_path = args.fixed.as_deref().context("missing --fixed")?;
    let moving_path = args.moving.as_deref().context("missing --moving")?;
    let fixed = io::read_image(fixed_path).with_context(|| format!("reading {}", fixed_path.display()))?;
    let moving = io::read_image(moving_path).with_context(|| format!("reading {}", moving_path.display()))?;
    let labels = match (&args.fixed_labels, &args.moving_labels) {
        (Some(f), Some(m)) => Some((read_labels(f)?, read_labels(m)?)),
        _ => None,
    };

    let out = &args.out_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("config.json"), args)?;

    let log_path = out.join("log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
    let mut log_error = None;
    let result = register_with(&fixed, &moving, &config, |record| {
        if log_error.is_none() {
            let line = serde_json::to_string(record).map_err(std::io::Error::other);
            if let Err(e) = line.and_then(|l| writeln!(log, "{l}")) {
                log_error = Some(e);
            }
        }
    });
    log.flush()?;
    if let Some(e) = log_error {
        return Err(anyhow::Error::from(e).context(format!("writing {}", log_path.display())));
    }
    let result = match result {
        Err(Error::OptimizationDiverged { iteration, last_finite }) => {
            let model = config.build_model(fixed.shape())?.with_params(last_finite.clone())?;
            io::write_params(&out.join("theta_last_finite.raw"), &model)?;
            return Err(Error::OptimizationDiverged { iteration, last_finite }.into());
        }
        other => other?,
    };

    let psi = &result.deformation;
    let warped = warp(&moving, psi)?;
    let warped_name = if is_pgm(moving_path) && fixed.shape().ndim() == 2 { "warped.pgm" } else { "warped.raw" };
    io::write_image(&out.join(warped_name), &warped)?;
    io::write_cloud(&out.join("field.raw"), psi)?;
    io::write_params(&out.join("theta.raw"), &result.model)?;
    let jac = jacobian_det_map(psi);
    io::write_jacobian(&out.join("jdet.raw"), &jac)?;
    io::write_pgm(&out.join("jdet.pgm"), &render::jacobian_image(&jac)?, 255)?;
    io::write_pgm(&out.join("grid.pgm"), &render::grid_image(psi, args.grid_spacing)?, 255)?;

    let warped_labels = match &labels {
        Some((_, m)) => {
            let w = warp_labels(m, psi)?;
            io::write_labels(&out.join("warped_labels.raw"), &w)?;
            Some(w)
        }
        None => None,
    };
    let report = metrics_report(labels.as_ref().map(|(f, _)| f), warped_labels.as_ref(), &[], Some(psi))?;
    write_json(&out.join("metrics.json"), &report)?;
    let last = result.final_report();
    eprintln!(
        "done: loss {:.6} (sim {:.6}), negative Jacobians {:.4}%, outputs in {}",
        last.total,
        last.sim,
        100.0 * last.neg_jacobian_ratio,
        out.display()
    );
    Ok(())
}

pub fn cmd_warp(args: &WarpArgs) -> anyhow::Result<()> {
    let cloud = io::read_cloud(&args.field).with_context(|| format!("reading field {}", args.field.display()))?;
    if args.labels {
        let warped = warp_labels(&read_labels(&args.input)?, &cloud)?;
        io::write_labels(&args.output, &warped)?;
    } else {
        let image = io::read_image(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
        io::write_image(&args.output, &warp(&image, &cloud)?)?;
    }
    Ok(())
}

pub fn cmd_metrics(args: &MetricsArgs) -> anyhow::Result<()> {
    let cloud = match &args.field {
        Some(p) => Some(io::read_cloud(p).with_context(|| format!("reading field {}", p.display()))?),
        None => None,
    };
    let fixed = args.fixed_labels.as_deref().map(read_labels).transpose()?;
    let mut moving = args.moving_labels.as_deref().map(read_labels).transpose()?;
    if let (Some(m), Some(c)) = (&moving, &cloud) {
        moving = Some(warp_labels(m, c)?);
    }
    let report = metrics_report(fixed.as_ref(), moving.as_ref(), &args.labels, cloud.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(out) = &args.output {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn cmd_gridviz(args: &GridvizArgs) -> anyhow::Result<()> {
    let cloud = io::read_cloud(&args.field).with_context(|| format!("reading field {}", args.field.display()))?;
    io::write_pgm(&args.output, &render::grid_image(&cloud, args.spacing)?, 255)?;
    Ok(())
}

pub fn cmd_demo(args: &DemoArgs) -> anyhow::Result<()> {
    let pair = match args.pair {
        PairArg::DonutCircle => DemoPair::DonutCircle,
        PairArg::SquareCross => DemoPair::SquareCross,
        PairArg::TwoBlobs => DemoPair::TwoBlobs,
        PairArg::BrainSlice => DemoPair::BrainSlice,
    };
    fs::create_dir_all(&args.out_dir).with_context(|| format!("creating {}", args.out_dir.display()))?;
    let (fixed, moving) = pair.images();
    io::write_pgm(&args.out_dir.join("fixed.pgm"), &fixed, u16::MAX)?;
    io::write_pgm(&args.out_dir.join("moving.pgm"), &moving, u16::MAX)?;
    if let DemoPair::BrainSlice = pair {
        let (f, m) = brain_slice_labels();
        io::write_labels(&args.out_dir.join("fixed_labels.raw"), &f)?;
        io::write_labels(&args.out_dir.join("moving_labels.raw"), &m)?;
    }
    Ok(())
}
