//! `imagetar`: every pipeline stage as a subcommand. Stages hand off through
//! files in the data directory, so `scan`, `dedup`, `embed`, `cluster` and
//! `report` can be run one after another with no further arguments.

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use imagetar_core::ann::{DEFAULT_CHECKS, DEFAULT_LEAF_SIZE, DEFAULT_PRECISION_K, DEFAULT_TREE_COUNT};
use imagetar_core::embedding::{DEFAULT_BATCH_SIZE, DEFAULT_DIM};
use imagetar_core::ingest::HashAlgorithm;
use imagetar_core::kmeans::{DEFAULT_MAX_ITERS, DEFAULT_SAMPLE_SIZE, DEFAULT_TOL};
use tracing_subscriber::EnvFilter;

#[derive(Debug, Parser)]
#[command(name = "imagetar", version, about = "Deduplicate, embed and cluster an image corpus for cluster-level review")]
pub struct Cli {
    /// Stage outputs and the service store live here. Created if absent.
    #[arg(long, global = true, env = "IMAGETAR_DATA_DIR", default_value = "imagetar-data")]
    pub data_dir: PathBuf,

    /// Seed for k-means initialization, tree construction and query sampling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// More log output on stderr (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Walk a corpus and write the image manifest.
    Scan(ScanArgs),
    /// Group byte-identical images.
    Dedup(DedupArgs),
    /// Write the frequency table of duplicate groups.
    Tally(TallyArgs),
    /// Mark high-frequency groups as excluded from clustering.
    Exclude(ExcludeArgs),
    /// Embed one representative per duplicate group.
    Embed(EmbedArgs),
    /// Fit K-means over the embedded representatives.
    Cluster(ClusterArgs),
    /// Nearest neighbors of one image.
    Knn(KnnArgs),
    /// Compare the approximate index against the exact scan.
    Precision(PrecisionArgs),
    /// Categorization report with per-label image totals.
    Report(ReportArgs),
    /// Run the review service over the data directory.
    Serve(ServeArgs),
    /// External-embedder protocol around the reference embedder.
    #[command(hide = true)]
    EmbedWorker(EmbedWorkerArgs),
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    /// Corpus root directory.
    pub corpus: PathBuf,
    /// Only scan the top-level directory.
    #[arg(long)]
    pub no_recurse: bool,
    /// Comma-separated extension allow-list.
    #[arg(long, value_delimiter = ',')]
    pub extensions: Option<Vec<String>>,
    #[arg(long, default_value = "sha256")]
    pub hash: HashAlgorithm,
    /// Default: <data-dir>/manifest.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DedupArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Default: <data-dir>/groups.jsonl
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TallyArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Default: <data-dir>/tally.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExcludeArgs {
    /// Exclude every group with at least this many copies (2 or more).
    #[arg(long, required_unless_present = "hashes")]
    pub min_frequency: Option<usize>,
    /// File with one content hash per line to exclude.
    #[arg(long)]
    pub hashes: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Default: the input manifest, rewritten in place.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormalizeArg {
    None,
    L2,
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    /// Corpus root. Default: the root recorded by `scan`.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = DEFAULT_BATCH_SIZE)]
    pub batch_size: usize,
    #[arg(long, value_enum, default_value = "none")]
    pub normalize: NormalizeArg,
    /// External embedder, run as `COMMAND manifest_path output_path dim`.
    #[arg(long)]
    pub external: Option<String>,
    /// Default: <data-dir>/vectors.fvec
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Default: <data-dir>/failures.jsonl
    #[arg(long)]
    pub failures: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ClusterArgs {
    /// Cluster count. Default: 150, or the number of vectors if smaller.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    pub max_iters: usize,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = DEFAULT_SAMPLE_SIZE)]
    pub sample_size: usize,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Default: <data-dir>/model.kmeans
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Default: <data-dir>/summaries.json, written when the manifest and
    /// groups are available.
    #[arg(long)]
    pub summaries: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct ForestArgs {
    #[arg(long, default_value_t = DEFAULT_TREE_COUNT)]
    pub trees: usize,
    #[arg(long, default_value_t = DEFAULT_LEAF_SIZE)]
    pub leaf_size: usize,
    /// Leaf visits per query.
    #[arg(long, default_value_t = DEFAULT_CHECKS)]
    pub checks: usize,
}

#[derive(Debug, Args)]
pub struct KnnArgs {
    /// Query by image id (duplicates resolve to their group's vector).
    #[arg(long, conflicts_with = "row", required_unless_present = "row")]
    pub image: Option<String>,
    /// Query by row of the vectors file.
    #[arg(long)]
    pub row: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    /// Use the exact linear scan instead of the forest.
    #[arg(long)]
    pub exact: bool,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Default: <data-dir>/knn.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrecisionArgs {
    #[arg(long, default_value_t = DEFAULT_PRECISION_K)]
    pub k: usize,
    /// Number of sampled query points.
    #[arg(long, default_value_t = 200)]
    pub queries: usize,
    #[command(flatten)]
    pub forest: ForestArgs,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    /// Default: <data-dir>/precision.csv
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Round number the tags refer to.
    #[arg(long, default_value_t = 1)]
    pub round: u32,
    /// Tag event log. Default: <data-dir>/tags.jsonl if present, else all
    /// clusters untagged.
    #[arg(long)]
    pub tags: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: ReportFormat,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[arg(long)]
    pub vectors: Option<PathBuf>,
    #[arg(long)]
    pub failures: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Default: <data-dir>/report.csv or report.json
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct EmbedWorkerArgs {
    pub manifest: PathBuf,
    pub output: PathBuf,
    pub dim: usize,
    #[arg(long, value_enum, default_value = "none")]
    pub normalize: NormalizeArg,
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(level));
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(filter)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    init_logging(cli.verbose);
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("imagetar: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
