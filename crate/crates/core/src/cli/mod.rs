//! The `mkdiff` command line.
//!
//! Exit codes: 0 success, 1 usage error (bad flags, unknown or ill-typed
//! configuration keys, missing required paths), 2 runtime failure.

mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use crate::error::Error;

pub use config::{CommandOptions, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "mkdiff",
    version,
    about = "Multi-kernel diffusion networks for point clouds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic articulated-body dataset with a manifest.
    Synth(SynthArgs),
    /// Report kNN graph and kernel statistics for one cloud.
    GraphStats(GraphStatsArgs),
    /// Train a descriptor network with the triplet hinge loss.
    TrainDesc(TrainArgs),
    /// Train a segmentation network with weighted cross-entropy.
    TrainSeg(TrainArgs),
    /// Compute descriptors for one cloud.
    Extract(ExtractArgs),
    /// CMC, ROC and correspondence quality on a dataset split.
    EvalDesc(EvalArgs),
    /// Dice on a dataset split.
    EvalSeg(EvalArgs),
    /// Apply one disturbance to a cloud.
    Perturb(PerturbArgs),
    /// Dice of a segmentation checkpoint over a disturbance grid.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Flat JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Bit-reproducible run: ordered reductions and zero wall-clock fields.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads (falls back to MKDIFF_THREADS, then all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Extra configuration `key=value`; the value is parsed as JSON when
    /// possible and as a string otherwise.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Debug, Args)]
struct GraphArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    t: Option<usize>,
    /// Comma-separated diffusion widths.
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// rw, exact-spectral or exact-cg.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// sym-normalized or rw-normalized.
    #[arg(long)]
    propagation: Option<String>,
    #[arg(long)]
    m: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    shapes: Option<usize>,
    #[arg(long)]
    points: Option<usize>,
    /// xyz-ascii, ply-ascii or bin-f32.
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct GraphStatsArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[command(flatten)]
    graph: GraphArgs,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    #[arg(long)]
    descriptor_dim: Option<usize>,
    #[arg(long)]
    triplets_per_step: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    hidden_width: Option<usize>,
    #[arg(long)]
    dropout_p: Option<f64>,
    /// Add the background class (label 0) to the segmentation head.
    #[arg(long)]
    background: bool,
    #[arg(long)]
    outlier_augment: Option<f64>,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// train, val or test.
    #[arg(long)]
    split: Option<String>,
    /// Cap on ordered shape pairs (descriptor evaluation).
    #[arg(long)]
    max_pairs: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
}

#[derive(Debug, Args)]
struct PerturbArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    cloud: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// noise, missing or outlier.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    magnitude: Option<f64>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    kind: Option<String>,
    /// Comma-separated disturbance magnitudes.
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    #[arg(long)]
    split: Option<String>,
}

/// Collects flag values as configuration overrides.
#[derive(Default)]
struct Overrides(Vec<(String, Value)>);

impl Overrides {
    fn put<T: Into<Value>>(&mut self, key: &str, v: Option<T>) {
        if let Some(v) = v {
            self.0.push((key.to_string(), v.into()));
        }
    }

    fn path(&mut self, key: &str, v: &Option<PathBuf>) {
        self.put(key, v.as_ref().map(|p| p.to_string_lossy().into_owned()));
    }

    fn flag(&mut self, key: &str, set: bool) {
        if set {
            self.0.push((key.to_string(), Value::Bool(true)));
        }
    }

    fn common(&mut self, c: &CommonArgs) -> Result<(), Error> {
        self.path("out", &c.out);
        self.put("seed", c.seed);
        self.flag("deterministic", c.deterministic);
        self.put("threads", c.threads);
        for kv in &c.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
                key: kv.clone(),
                msg: "expected KEY=VALUE".into(),
            })?;
            let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            self.0.push((k.to_string(), value));
        }
        Ok(())
    }

    fn graph(&mut self, g: &GraphArgs) {
        self.put("k", g.k);
        self.put("t", g.t);
        self.put("sigmas", g.sigmas.clone().map(|s| json!(s)));
        self.put("mode", g.mode.clone());
        self.put("lambda", g.lambda);
        self.put("propagation", g.propagation.clone());
        self.put("m", g.m);
    }
}

fn resolve(common: &CommonArgs, fill: impl FnOnce(&mut Overrides)) -> Result<RunConfig, Error> {
    let mut o = Overrides::default();
    o.common(common)?;
    fill(&mut o);
    RunConfig::resolve(common.config.as_deref(), &o.0)
}

fn resolve_command(cmd: &Command) -> Result<RunConfig, Error> {
    match cmd {
        Command::Synth(a) => resolve(&a.common, |o| {
            o.put("shapes", a.shapes);
            o.put("points", a.points);
            o.put("format", a.format.clone());
        }),
        Command::GraphStats(a) => resolve(&a.common, |o| {
            o.graph(&a.graph);
            o.path("cloud", &a.cloud);
            o.put("format", a.format.clone());
        }),
        Command::TrainDesc(a) | Command::TrainSeg(a) => resolve(&a.common, |o| {
            let task = if matches!(cmd, Command::TrainDesc(_)) {
                "descriptor"
            } else {
                "segmentation"
            };
            o.0.push(("task".into(), Value::from(task)));
            o.graph(&a.graph);
            o.path("manifest", &a.manifest);
            o.put("epochs", a.epochs);
            o.put("lr", a.lr);
            o.put("margin", a.margin);
            o.put("descriptor_dim", a.descriptor_dim);
            o.put("triplets_per_step", a.triplets_per_step);
            o.put("n_layers", a.n_layers);
            o.put("hidden_width", a.hidden_width);
            o.put("dropout_p", a.dropout_p);
            o.flag("background", a.background);
            o.put("outlier_augment", a.outlier_augment);
        }),
        Command::Extract(a) => resolve(&a.common, |o| {
            o.path("ckpt", &a.ckpt);
            o.path("cloud", &a.cloud);
            o.put("format", a.format.clone());
        }),
        Command::EvalDesc(a) | Command::EvalSeg(a) => resolve(&a.common, |o| {
            o.path("ckpt", &a.ckpt);
            o.path("manifest", &a.manifest);
            o.put("split", a.split.clone());
            o.put("max_pairs", a.max_pairs);
            o.put("k_max", a.k_max);
        }),
        Command::Perturb(a) => resolve(&a.common, |o| {
            o.path("cloud", &a.cloud);
            o.put("format", a.format.clone());
            o.put("kind", a.kind.clone());
            o.put("magnitude", a.magnitude);
        }),
        Command::Sweep(a) => resolve(&a.common, |o| {
            o.path("ckpt", &a.ckpt);
            o.path("manifest", &a.manifest);
            o.put("kind", a.kind.clone());
            o.put("grid", a.grid.clone().map(|g| json!(g)));
            o.put("split", a.split.clone());
        }),
    }
}

fn thread_count(cfg: &RunConfig) -> Option<usize> {
    cfg.options.threads.or_else(|| {
        std::env::var("MKDIFF_THREADS")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .filter(|&n: &usize| n > 0)
    })
}

fn is_usage(e: &Error) -> bool {
    matches!(e, Error::Config { .. })
}

/// Parse `argv` (including the program name), run the command and return
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cfg = match resolve_command(&cli.command) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            };
        }
    };
    let result = match thread_count(&cfg) {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| commands::execute(&cli.command, &cfg)),
            Err(e) => Err(Error::InvalidArgument(format!("thread pool: {e}"))),
        },
        None => commands::execute(&cli.command, &cfg),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if is_usage(&e) {
                EXIT_USAGE
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
