//! `distillseg`: ingestion, simulated or served annotation, decoder training,
//! learning curves, evaluation and plotting.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error.

mod commands;
mod run_config;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use distillseg_core::data::Split;
use distillseg_core::prompt::AnnotationMode;
use distillseg_core::Result;

use run_config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "distillseg", version, about = "Distil a frozen segmentation encoder into a small decoder")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

/// Flags win over the config file.
#[derive(Debug, Args)]
struct GlobalArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Corpus directory holding manifest.json and the annotation log.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    annotations: Option<PathBuf>,
    /// Embedding cache directory (defaults to $DISTILLSEG_CACHE).
    #[arg(long, global = true)]
    cache: Option<PathBuf>,
    /// Use the built-in toy foundation model.
    #[arg(long, global = true, conflicts_with = "adapter_url")]
    toy_encoder: bool,
    /// Foundation model bridge endpoint.
    #[arg(long, global = true)]
    adapter_url: Option<String>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    learning_rate: Option<f64>,
    /// Decoder channels per upsampling stage, e.g. 128,64,32.
    #[arg(long, global = true, value_delimiter = ',')]
    channel_schedule: Option<Vec<usize>>,
    /// Annotation mode used when missing annotations are simulated.
    #[arg(long, global = true, value_enum)]
    mode: Option<SimMode>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SimMode {
    Automatic,
    Point,
    Box,
}

impl From<SimMode> for AnnotationMode {
    fn from(m: SimMode) -> Self {
        match m {
            SimMode::Automatic => AnnotationMode::Automatic,
            SimMode::Point => AnnotationMode::Point,
            SimMode::Box => AnnotationMode::Box,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a manifest from an image directory and a mask directory.
    Ingest {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        masks: PathBuf,
        /// JSON object mapping sample id to train|val|test; without it the
        /// ids are split by seed in the reference proportions.
        #[arg(long)]
        splits: Option<PathBuf>,
    },
    /// Generate a synthetic corpus with manifest.
    Synth {
        #[arg(long, default_value_t = 60)]
        n: usize,
        #[arg(long, default_value_t = 128)]
        size: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and cache embeddings for every manifest sample.
    Embed,
    /// Annotate training samples from ground truth through the foundation model.
    Simulate {
        /// Annotate every training id instead of only those the budgets use.
        #[arg(long)]
        all: bool,
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
    },
    /// Run the annotation HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
    /// Train one decoder on a budget of annotated samples.
    Train {
        #[arg(long)]
        budget: usize,
        /// Checkpoint path (default <data>/decoder-<budget>.ckpt).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one decoder per budget and evaluate each on the test split.
    Curve {
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<usize>>,
        /// Report path (default <data>/curve.json).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a decoder checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render a curve report as SVG plus CSV.
    Plot {
        /// Curve report (default <data>/curve.json).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// SVG path (default beside the report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn build_run_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut c = match &g.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        c.seed = seed;
    }
    if let Some(d) = &g.data {
        c.paths.data = d.clone();
    }
    if let Some(p) = &g.manifest {
        c.paths.manifest = Some(p.clone());
    }
    if let Some(p) = &g.annotations {
        c.paths.annotations = Some(p.clone());
    }
    if let Some(p) = &g.cache {
        c.paths.cache = Some(p.clone());
    }
    if g.toy_encoder {
        c.use_toy_encoder();
    }
    if let Some(url) = &g.adapter_url {
        c.adapter = distillseg_core::gateway::AdapterConfig::Http { url: url.clone() };
    }
    if let Some(v) = g.epochs {
        c.train.epochs = v;
    }
    if let Some(v) = g.batch_size {
        c.train.batch_size = v;
    }
    if let Some(v) = g.learning_rate {
        c.train.learning_rate = v;
    }
    if let Some(v) = &g.channel_schedule {
        c.train.channel_schedule = v.clone();
    }
    if let Some(m) = g.mode {
        c.annotation_mode = m.into();
    }
    Ok(c)
}

fn dispatch(cli: Cli) -> Result<()> {
    let mut config = build_run_config(&cli.global)?;
    match cli.command {
        Command::Ingest { images, masks, splits } => commands::ingest(&config.finalize(), &images, &masks, splits.as_deref()),
        Command::Synth { n, size, out } => {
            config.paths.data = out.clone();
            commands::synth(&config.finalize(), n, size, &out)
        }
        Command::Embed => commands::embed(&config.finalize()),
        Command::Simulate { all, budgets } => {
            if let Some(b) = budgets {
                config.train.budgets = b;
            }
            commands::simulate(&config.finalize(), all)
        }
        Command::Serve { addr } => commands::serve(&config.finalize(), addr),
        Command::Train { budget, out } => {
            config.train.budgets = vec![budget];
            commands::train(config.finalize(), budget, out)
        }
        Command::Curve { budgets, out } => {
            if let Some(b) = budgets {
                config.train.budgets = b;
            }
            commands::curve(config.finalize(), out)
        }
        Command::Eval { checkpoint, split, out } => commands::eval(config.finalize(), &checkpoint, split.into(), out),
        Command::Plot { curve, out } => commands::plot(&config.finalize(), curve, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // clap exits 2 on usage errors and 0 for --help / --version
        Err(e) => e.exit(),
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
