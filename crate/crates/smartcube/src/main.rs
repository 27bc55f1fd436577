//! Command-line entry point. Machine-readable results go to stdout as
//! line-delimited JSON; diagnostics and progress go to stderr. Exit codes:
//! 0 success, 2 usage/config error, 3 data error.

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use smartcube::config::RunConfig;
use smartcube::pipeline;
use smartcube::Result;

#[derive(Parser)]
#[command(
    name = "smartcube",
    version,
    about = "Desk-scale satellite imagery ETL and spatiotemporal segmentation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// STAC catalog operations.
    Catalog {
        #[command(subcommand)]
        command: CatalogCommand,
    },
    /// Datacube assembly and inspection.
    Cube {
        #[command(subcommand)]
        command: CubeCommand,
    },
    /// Model training, inference, and verification.
    Model {
        #[command(subcommand)]
        command: ModelCommand,
    },
}

#[derive(Subcommand)]
enum CatalogCommand {
    /// Query a catalog; prints matching items ascending by (datetime, id).
    Search(Flags),
}

#[derive(Subcommand)]
enum CubeCommand {
    /// Assemble a chunked store from a catalog query.
    Build(Flags),
    /// Summarize an existing store and its per-frame quality.
    Info(Flags),
}

#[derive(Subcommand)]
enum ModelCommand {
    /// Train on aligned data and label stores.
    Train(Flags),
    /// Write per-frame probability rasters for a store.
    Infer(Flags),
    /// Finite-difference check of every parameter group.
    Gradcheck(Flags),
}

/// Shared flag set; every flag overrides the corresponding config key.
#[derive(Args)]
struct Flags {
    /// Config file: flat `key = value`, `#` comments.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Catalog root document (path or URL).
    #[arg(long)]
    catalog: Option<String>,
    /// Query extent: minx,miny,maxx,maxy in EPSG:4326 degrees.
    #[arg(long)]
    bbox: Option<String>,
    /// Inclusive start of the time range, RFC 3339.
    #[arg(long)]
    start: Option<String>,
    /// Inclusive end of the time range, RFC 3339.
    #[arg(long)]
    end: Option<String>,
    /// Comma-separated band names.
    #[arg(long)]
    bands: Option<String>,
    /// Target resolution in projected meters.
    #[arg(long)]
    resolution: Option<f64>,
    /// Chunk dims: ct,cb,cy,cx.
    #[arg(long)]
    chunk: Option<String>,
    /// Worker lanes for task execution.
    #[arg(long)]
    workers: Option<usize>,
    /// Keep frames with cloud fraction <= this.
    #[arg(long)]
    max_cloud: Option<f64>,
    /// Keep frames with valid fraction >= this.
    #[arg(long)]
    min_valid: Option<f64>,
    /// Seed for every randomized choice.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (build, infer).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Existing store to read (info, train, infer).
    #[arg(long)]
    store: Option<PathBuf>,
    /// Label store (train).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Model artifact path.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// SGD learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Per-layer task progress on stderr.
    #[arg(long)]
    verbose: bool,
}

impl Flags {
    /// Defaults, then the config file, then explicit flags.
    fn into_config(self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.catalog {
            cfg.set("catalog", v)?;
        }
        if let Some(v) = &self.bbox {
            cfg.set("bbox", v)?;
        }
        if let Some(v) = &self.start {
            cfg.set("start", v)?;
        }
        if let Some(v) = &self.end {
            cfg.set("end", v)?;
        }
        if let Some(v) = &self.bands {
            cfg.set("bands", v)?;
        }
        if let Some(v) = self.resolution {
            cfg.set("resolution", &v.to_string())?;
        }
        if let Some(v) = &self.chunk {
            cfg.set("chunk", v)?;
        }
        if let Some(v) = self.workers {
            cfg.set("workers", &v.to_string())?;
        }
        if let Some(v) = self.max_cloud {
            cfg.set("max_cloud", &v.to_string())?;
        }
        if let Some(v) = self.min_valid {
            cfg.set("min_valid", &v.to_string())?;
        }
        if let Some(v) = self.seed {
            cfg.set("seed", &v.to_string())?;
        }
        if let Some(v) = &self.out {
            cfg.out = Some(v.clone());
        }
        if let Some(v) = &self.store {
            cfg.store = Some(v.clone());
        }
        if let Some(v) = &self.labels {
            cfg.labels = Some(v.clone());
        }
        if let Some(v) = &self.model {
            cfg.model = Some(v.clone());
        }
        if let Some(v) = self.epochs {
            cfg.set("epochs", &v.to_string())?;
        }
        if let Some(v) = self.lr {
            cfg.set("lr", &v.to_string())?;
        }
        if self.verbose {
            cfg.verbose = true;
        }
        Ok(cfg)
    }
}

fn emit(events: &[serde_json::Value]) {
    use std::io::Write;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for event in events {
        if let Err(e) = writeln!(out, "{event}") {
            // A consumer like `head` closing the pipe early is not an
            // error; anything else on stdout is unrecoverable anyway.
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            eprintln!("error: cannot write to stdout: {e}");
            std::process::exit(3);
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Catalog {
            command: CatalogCommand::Search(flags),
        } => {
            emit(&pipeline::run_search(&flags.into_config()?)?);
        }
        Command::Cube {
            command: CubeCommand::Build(flags),
        } => {
            let cfg = flags.into_config()?;
            let progress = cfg.verbose.then(|| {
                Arc::new(|layer: usize, layers: usize, tasks: usize| {
                    eprintln!("layer {}/{layers}: {tasks} tasks done", layer + 1);
                }) as Arc<smartcube::graph::exec::ProgressFn>
            });
            let outcome = pipeline::run_build(&cfg, progress)?;
            emit(&outcome.events);
        }
        Command::Cube {
            command: CubeCommand::Info(flags),
        } => {
            emit(&pipeline::run_info(&flags.into_config()?)?);
        }
        Command::Model {
            command: ModelCommand::Train(flags),
        } => {
            emit(&pipeline::run_train(&flags.into_config()?)?);
        }
        Command::Model {
            command: ModelCommand::Infer(flags),
        } => {
            emit(&pipeline::run_infer(&flags.into_config()?)?);
        }
        Command::Model {
            command: ModelCommand::Gradcheck(flags),
        } => {
            let (events, pass) = pipeline::run_gradcheck(&flags.into_config()?)?;
            emit(&events);
            if !pass {
                eprintln!("gradient check failed");
                return Ok(3);
            }
        }
    }
    Ok(0)
}

fn main() {
    // Clap handles usage errors itself with exit code 2.
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                2
            } else {
                3
            }
        }
    };
    std::process::exit(code);
}
