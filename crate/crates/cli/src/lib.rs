//! Command-line front end: `gen-data`, `train`, `reconstruct`, `benchmark`
//! and `export-viz`.
//!
//! Every setting can come from a flag or from a flat `key = value` file
//! passed with `--config`; flags win, then the file, then the built-in
//! desk-scale default.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod error;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use flowtie::nn::{AdamWConfig, LossWeights, Normalization, TrainConfig};
use flowtie::recon::Method;
use flowtie::specimen::Preset;
use flowtie::tie::TieVariant;

use commands::bench::{benchmark, BenchOptions};
use commands::gen_data::{describe, gen_data, GenDataOptions};
use commands::reconstruct::{reconstruct, MethodParams, ReconstructOptions};
use commands::train::{train, TrainOptions};
use commands::viz::{export_viz, VizKind, VizOptions};
use config::{ConfigFile, List};
pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "flowtie", version, about = "4D-STEM phase retrieval: data, training, reconstruction, benchmarks")]
pub struct Cli {
    /// Flat `key = value` settings file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a training corpus and held-out test datasets.
    GenData(GenDataArgs),
    /// Train the flow predictor on a corpus.
    Train(TrainArgs),
    /// Reconstruct one dataset with one method.
    Reconstruct(ReconstructArgs),
    /// Run every method on the test datasets with repeated timing.
    Benchmark(BenchArgs),
    /// Export a tensor as 8-bit PGM images.
    ExportViz(VizArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of random training structures.
    #[arg(long)]
    pub structures: Option<usize>,
    /// Detector / simulation grid side.
    #[arg(long)]
    pub n: Option<usize>,
    /// Scan positions per side.
    #[arg(long)]
    pub scan: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Accelerating voltage (kV).
    #[arg(long)]
    pub kv: Option<f64>,
    /// Probe semi-angle (mrad).
    #[arg(long)]
    pub semi_angle: Option<f64>,
    /// Defocus step of the triplet (Å).
    #[arg(long)]
    pub defocus_step: Option<f64>,
    /// Candidate training thicknesses in unit cells, comma-separated.
    #[arg(long)]
    pub cells: Option<List<usize>>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    /// Test presets, comma-separated (gaas, srtio3).
    #[arg(long)]
    pub presets: Option<List<Preset>>,
    /// Test thicknesses in unit cells, comma-separated.
    #[arg(long)]
    pub test_cells: Option<List<usize>>,
    /// Extra test structures as JSON files.
    #[arg(long = "structure")]
    pub structure_files: Vec<PathBuf>,
    /// Worker threads for simulation.
    #[arg(long)]
    pub threads: Option<usize>,
    /// Accepted for symmetry; generation is always deterministic.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden width.
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub kernel: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Input standardization: scalar or per-channel.
    #[arg(long)]
    pub normalization: Option<String>,
    /// Record that bit-exact reproducibility was requested.
    #[arg(long)]
    pub deterministic: bool,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    pub resume: bool,
    /// Stop after this many total epochs.
    #[arg(long)]
    pub stop_after: Option<usize>,
    #[arg(long)]
    pub save_every: Option<usize>,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct MethodArgs {
    /// Tikhonov regularizer of the TIE Poisson solve.
    #[arg(long)]
    pub tie_eps: Option<f64>,
    /// poisson or teague.
    #[arg(long)]
    pub tie_variant: Option<TieVariant>,
    #[arg(long)]
    pub gd_iters: Option<usize>,
    /// Absolute ridge of the matrix-potential estimate.
    #[arg(long)]
    pub ridge: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// TIE, FlowTIE or GD.
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Result bundle directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep the matrix potential in the result bundle.
    #[arg(long)]
    pub save_matrix: bool,
    #[command(flatten)]
    pub method_args: MethodArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Additional dataset directories.
    #[arg(long = "dataset")]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Report directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub repeats: Option<usize>,
    /// Methods, comma-separated.
    #[arg(long)]
    pub methods: Option<List<Method>>,
    #[command(flatten)]
    pub method_args: MethodArgs,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    /// Dataset or result bundle.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// proj-phase, vfield or diffraction.
    #[arg(long)]
    pub what: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub tensor: Option<String>,
    #[arg(long)]
    pub channel: Option<usize>,
    /// Scan position `sy,sx` for diffraction patterns.
    #[arg(long)]
    pub position: Option<List<usize>>,
    #[arg(long)]
    pub arrows: Option<usize>,
}

fn required<T>(value: Option<T>, key: &str) -> Result<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing --{key} (flag or config key)")))
}

fn parse_normalization(s: &str) -> Result<Normalization> {
    match s {
        "scalar" => Ok(Normalization::Scalar),
        "per-channel" | "per_channel" => Ok(Normalization::PerChannel),
        other => Err(CliError::ConfigValue {
            key: "normalization".into(),
            reason: format!("{other:?} is not scalar or per-channel"),
        }),
    }
}

const GEN_KEYS: &[&str] = &[
    "out", "structures", "n", "scan", "seed", "kv", "semi_angle", "defocus_step", "cells", "val_fraction",
    "presets", "test_cells", "threads", "deterministic",
];
const TRAIN_KEYS: &[&str] = &[
    "corpus", "out", "epochs", "seed", "d", "kernel", "lr", "weight_decay", "alpha", "beta", "gamma",
    "normalization", "deterministic", "resume", "stop_after", "save_every", "quiet",
];
const METHOD_KEYS: &[&str] = &["tie_eps", "tie_variant", "gd_iters", "ridge", "seed", "deterministic"];
const RECON_KEYS: &[&str] = &["dataset", "method", "checkpoint", "out", "save_matrix"];
const BENCH_KEYS: &[&str] = &["corpus", "checkpoint", "out", "repeats", "methods"];
const VIZ_KEYS: &[&str] = &["input", "what", "out", "tensor", "channel", "position", "arrows"];

fn check_keys(cfg: &ConfigFile, groups: &[&[&str]]) -> Result<()> {
    let known: Vec<&str> = groups.iter().flat_map(|g| g.iter().copied()).collect();
    cfg.check_known(&known)
}

fn method_params(cfg: &ConfigFile, a: MethodArgs, save_matrix: bool) -> Result<MethodParams> {
    let d = MethodParams::default();
    cfg.switch("deterministic", a.deterministic)?;
    Ok(MethodParams {
        tie_eps: cfg.resolve("tie_eps", a.tie_eps, d.tie_eps)?,
        tie_variant: cfg.resolve("tie_variant", a.tie_variant, d.tie_variant)?,
        gd_iters: cfg.resolve("gd_iters", a.gd_iters, d.gd_iters)?,
        seed: cfg.resolve("seed", a.seed, d.seed)?,
        ridge: cfg.resolve_opt("ridge", a.ridge)?,
        keep_matrix: save_matrix,
    })
}

pub fn gen_data_options(cfg: &ConfigFile, a: GenDataArgs) -> Result<GenDataOptions> {
    check_keys(cfg, &[GEN_KEYS])?;
    let out = required(cfg.resolve_opt("out", a.out)?, "out")?;
    let d = GenDataOptions::desk(&out);
    cfg.switch("deterministic", a.deterministic)?;
    Ok(GenDataOptions {
        out,
        structures: cfg.resolve("structures", a.structures, d.structures)?,
        n: cfg.resolve("n", a.n, d.n)?,
        scan: cfg.resolve("scan", a.scan, d.scan)?,
        seed: cfg.resolve("seed", a.seed, d.seed)?,
        accel_kv: cfg.resolve("kv", a.kv, d.accel_kv)?,
        semi_angle_mrad: cfg.resolve("semi_angle", a.semi_angle, d.semi_angle_mrad)?,
        defocus_step: cfg.resolve("defocus_step", a.defocus_step, d.defocus_step)?,
        cells: cfg.resolve("cells", a.cells, List(d.cells))?.0,
        val_fraction: cfg.resolve("val_fraction", a.val_fraction, d.val_fraction)?,
        presets: cfg.resolve("presets", a.presets, List(d.presets))?.0,
        test_cells: cfg.resolve("test_cells", a.test_cells, List(d.test_cells))?.0,
        structure_files: a.structure_files,
        threads: cfg.resolve("threads", a.threads, d.threads)?,
    })
}

pub fn train_options(cfg: &ConfigFile, a: TrainArgs) -> Result<TrainOptions> {
    check_keys(cfg, &[TRAIN_KEYS])?;
    let corpus = required(cfg.resolve_opt("corpus", a.corpus)?, "corpus")?;
    let out = required(cfg.resolve_opt("out", a.out)?, "out")?;
    let mut opts = TrainOptions::new(corpus, out);
    let d = TrainConfig::default();
    let (w, o) = (LossWeights::default(), AdamWConfig::default());
    let normalization = match cfg.resolve_opt::<String>("normalization", a.normalization)? {
        Some(s) => parse_normalization(&s)?,
        None => d.normalization,
    };
    opts.config = TrainConfig {
        epochs: cfg.resolve("epochs", a.epochs, d.epochs)?,
        seed: cfg.resolve("seed", a.seed, 7)?,
        d: cfg.resolve("d", a.d, d.d)?,
        kernel: cfg.resolve("kernel", a.kernel, d.kernel)?,
        weights: LossWeights {
            alpha: cfg.resolve("alpha", a.alpha, w.alpha)?,
            beta: cfg.resolve("beta", a.beta, w.beta)?,
            gamma: cfg.resolve("gamma", a.gamma, w.gamma)?,
        },
        optim: AdamWConfig {
            lr: cfg.resolve("lr", a.lr, o.lr)?,
            weight_decay: cfg.resolve("weight_decay", a.weight_decay, o.weight_decay)?,
            ..o
        },
        normalization,
    };
    opts.resume = cfg.switch("resume", a.resume)?;
    opts.stop_after = cfg.resolve_opt("stop_after", a.stop_after)?;
    opts.save_every = cfg.resolve("save_every", a.save_every, opts.save_every)?;
    opts.quiet = cfg.switch("quiet", a.quiet)?;
    opts.deterministic = cfg.switch("deterministic", a.deterministic)?;
    Ok(opts)
}

pub fn reconstruct_options(cfg: &ConfigFile, a: ReconstructArgs) -> Result<ReconstructOptions> {
    check_keys(cfg, &[RECON_KEYS, METHOD_KEYS])?;
    let save_matrix = cfg.switch("save_matrix", a.save_matrix)?;
    Ok(ReconstructOptions {
        dataset: required(cfg.resolve_opt("dataset", a.dataset)?, "dataset")?,
        method: cfg.resolve("method", a.method, Method::Tie)?,
        checkpoint: cfg.resolve_opt("checkpoint", a.checkpoint)?,
        out: cfg.resolve_opt("out", a.out)?,
        params: method_params(cfg, a.method_args, save_matrix)?,
    })
}

pub fn bench_options(cfg: &ConfigFile, a: BenchArgs) -> Result<BenchOptions> {
    check_keys(cfg, &[BENCH_KEYS, METHOD_KEYS])?;
    let out = required(cfg.resolve_opt("out", a.out)?, "out")?;
    let mut opts = BenchOptions::new(out);
    opts.corpus = cfg.resolve_opt("corpus", a.corpus)?;
    opts.datasets = a.datasets;
    opts.checkpoint = cfg.resolve_opt("checkpoint", a.checkpoint)?;
    opts.repeats = cfg.resolve("repeats", a.repeats, opts.repeats)?;
    opts.methods = cfg.resolve("methods", a.methods, List(opts.methods))?.0;
    opts.params = method_params(cfg, a.method_args, false)?;
    Ok(opts)
}

pub fn viz_options(cfg: &ConfigFile, a: VizArgs) -> Result<VizOptions> {
    check_keys(cfg, &[VIZ_KEYS])?;
    let input = required(cfg.resolve_opt("input", a.input)?, "input")?;
    let what: VizKind = required(cfg.resolve_opt::<String>("what", a.what)?, "what")?.parse()?;
    let out = required(cfg.resolve_opt("out", a.out)?, "out")?;
    let mut opts = VizOptions::new(input, what, out);
    opts.tensor = cfg.resolve_opt("tensor", a.tensor)?;
    opts.channel = cfg.resolve("channel", a.channel, 0)?;
    opts.arrows = cfg.resolve("arrows", a.arrows, opts.arrows)?;
    if let Some(List(p)) = cfg.resolve_opt("position", a.position)? {
        match p[..] {
            [y, x] => opts.position = (y, x),
            _ => return Err(CliError::Usage("--position takes sy,sx".into())),
        }
    }
    Ok(opts)
}

/// Executes a parsed command line; the returned text goes to stdout.
pub fn run(cli: Cli) -> Result<String> {
    let cfg = ConfigFile::load_optional(cli.config.as_deref())?;
    match cli.command {
        Command::GenData(a) => {
            let opts = gen_data_options(&cfg, a)?;
            let corpus = gen_data(&opts)?;
            Ok(describe(&corpus, &opts.out))
        }
        Command::Train(a) => {
            let summary = train(&train_options(&cfg, a)?)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::Reconstruct(a) => {
            let (_, summary) = reconstruct(&reconstruct_options(&cfg, a)?)?;
            Ok(serde_json::to_string_pretty(&summary)?)
        }
        Command::Benchmark(a) => {
            let opts = bench_options(&cfg, a)?;
            let report = benchmark(&opts)?;
            Ok(commands::bench::render_table(&report).trim_end().to_string())
        }
        Command::ExportViz(a) => {
            let files = export_viz(&viz_options(&cfg, a)?)?;
            Ok(files.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join("\n"))
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_args<I, T>(args: I) -> Result<String>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| CliError::Usage(e.to_string().lines().next().unwrap_or("").to_string()))?;
    run(cli)
}
