//! Command-line driver: argument parsing, run configuration and the
//! subcommands. `main.rs` only parses arguments and maps errors to exit
//! codes, so tests can call [`run_with`] with extra codecs registered.

mod commands;
pub mod config;
mod io;

use std::path::PathBuf;

use binderdiff::codec::CodecRegistry;
use clap::{Args, Parser, Subcommand};
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] binderdiff::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 0 success, 2 configuration or input validation, 3 numerical
    /// divergence, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        use binderdiff::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                E::TrainingDivergence { .. } | E::SamplingDivergence(_) => 3,
                E::Io { .. } | E::Network(_) | E::Fetch { .. } | E::CacheMiss(_) => 1,
                _ => 2,
            },
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }
}

pub type CliResult<T = ()> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "binderdiff", version, about = "Receptor-conditioned peptide binder generation in embedding space")]
pub struct Cli {
    /// JSON run configuration; missing sections take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed, overriding the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for sampling, exploration and pairwise metrics.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Cache for downloaded FASTA files.
    #[arg(long, global = true, env = "BINDERDIFF_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Clean a records file and write a cluster-level train/val/test manifest.
    Split(SplitArgs),
    /// Encode sequences into an embedding container.
    Encode(EncodeArgs),
    /// Train the denoiser on the manifest's training records.
    Train(TrainArgs),
    /// Generate binder embeddings for a receptor and decode them.
    Sample(SampleArgs),
    /// Perturb embeddings until they decode to filter-passing sequences.
    Explore(ExploreArgs),
    /// Decode an embedding container to sequences.
    Decode(DecodeArgs),
    /// Diversity report for a set of sequences, embeddings or structures.
    Eval(EvalArgs),
    /// Write the noise schedule table as CSV.
    ScheduleDump(ScheduleDumpArgs),
    /// Download entry FASTA files from RCSB into the cache.
    Fetch(FetchArgs),
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    /// JSON-lines binder records.
    #[arg(long)]
    pub records: Option<PathBuf>,
    /// Two-column TSV: member id, cluster id.
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// Manifest JSON to write.
    #[arg(long)]
    pub out: PathBuf,
    /// TSV log of rejected records.
    #[arg(long)]
    pub rejections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// FASTA of sequences to encode, keyed by header id.
    #[arg(long, conflicts_with = "records")]
    pub fasta: Option<PathBuf>,
    /// Records file; writes `<id>:receptor` and `<id>:binder` entries.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Precomputed `<id>:receptor` / `<id>:binder` embeddings; without it
    /// the configured codec encodes the records.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReceptorArgs {
    /// Receptor sequence.
    #[arg(long, group = "receptor_source")]
    pub receptor: Option<String>,
    /// FASTA containing the receptor.
    #[arg(long, group = "receptor_source")]
    pub receptor_fasta: Option<PathBuf>,
    /// Fetch the receptor FASTA for this PDB entry (uses the cache).
    #[arg(long, group = "receptor_source")]
    pub pdb_id: Option<String>,
    /// FASTA entry to use when there are several: the header id, or its
    /// part before the first `|`.
    #[arg(long)]
    pub chain: Option<String>,
    /// 1-based pocket residues, e.g. `67-74` or `A67-G74,80`. A letter is
    /// checked against the receptor.
    #[arg(long)]
    pub pocket: String,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub receptor: ReceptorArgs,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Binder length in residues; defaults to `data.binder_length`.
    #[arg(long)]
    pub length: Option<usize>,
    /// Decoded sequences, one row per sample.
    #[arg(long)]
    pub out: PathBuf,
    /// Raw generated embeddings.
    #[arg(long)]
    pub out_embeddings: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExploreArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// FASTA of sequences.
    #[arg(long)]
    pub sequences: Option<PathBuf>,
    /// Embedding container; without it, sequences are encoded with the codec.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// JSON object mapping ids to lists of Cα coordinates.
    #[arg(long)]
    pub structures: Option<PathBuf>,
    /// JSON report to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for per-metric similarity matrix CSVs.
    #[arg(long)]
    pub matrix_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScheduleDumpArgs {
    /// CSV to write; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FetchArgs {
    /// Four-character PDB ids.
    #[arg(required = true)]
    pub ids: Vec<String>,
    /// Serve from the cache only.
    #[arg(long)]
    pub offline: bool,
    /// Alternative server root.
    #[arg(long)]
    pub base_url: Option<String>,
    /// Also write all retrieved chains to one FASTA file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> CliResult {
    run_with(cli, &CodecRegistry::default())
}

pub fn run_with(cli: Cli, codecs: &CodecRegistry) -> CliResult {
    let cfg = match &cli.config {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("config file {} does not exist", p.display())));
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    }
    .finalize(cli.seed)?;
    if cli.threads == 0 {
        return Err(CliError::Usage("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    let ctx = commands::Context {
        cfg,
        codecs,
        cache_dir: cli.cache_dir.clone(),
    };
    pool.install(|| commands::dispatch(&ctx, &cli.command))
}
