//! `xdsd`: command-line front end for cross-domain place recognition.
//!
//! Every flag can also be set through an `XDSD_*` environment variable (for
//! example `XDSD_K=5` or `XDSD_THREADS=1`); explicit flags win.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xdsd_core::eval::Method;
use xdsd_core::{MinerConfig, PyramidConfig, Season, VocabKind};

#[derive(Debug, Parser)]
#[command(name = "xdsd", version, about = "Cross-domain place recognition with nearest-neighbour scene descriptors")]
pub struct Cli {
    /// Worker threads [default: available parallelism]. Results do not depend on it.
    #[arg(long, global = true, env = "XDSD_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the experience library from a manifest's library collection.
    BuildLibrary(BuildLibraryArgs),
    /// Describe the database images and write the inverted index.
    Index(IndexArgs),
    /// Rank the database for every query of a manifest.
    Query(QueryArgs),
    /// Run a full experiment (metrics, rankings and analysis tables).
    Evaluate(EvaluateArgs),
    /// TF-IDF bag-of-words comparator: train a vocabulary and rank queries.
    Baseline(BaselineArgs),
    /// Generate a synthetic cross-domain world as descriptor files plus a manifest.
    GenWorld(GenWorldArgs),
    /// Nearest-neighbour distance profile of query features against the library.
    AnalyzeErrors(AnalyzeArgs),
    /// Which library domains explain the query features.
    AnalyzeUsage(AnalyzeArgs),
    /// Sub-image pairs contributing most to one query/database score.
    ReportSubimages(SubimageArgs),
}

fn positive_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a positive number, got {s}"))
    }
}

fn non_negative_f64(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be a non-negative number, got {s}"))
    }
}

fn rate(s: &str) -> Result<f64, String> {
    let v = non_negative_f64(s)?;
    if v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in [0, 1], got {s}"))
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(v) => Ok(v),
        Err(e) => Err(format!("{e}")),
    }
}

fn levels(s: &str) -> Result<u8, String> {
    let v: u8 = s.parse().map_err(|e| format!("{e}"))?;
    if v <= PyramidConfig::MAX_LEVELS {
        Ok(v)
    } else {
        Err(format!("at most {} levels", PyramidConfig::MAX_LEVELS))
    }
}

#[derive(Debug, Clone, Args)]
pub struct MinerArgs {
    /// Library neighbours per query feature [reference setting].
    #[arg(long, default_value_t = MinerConfig::DEFAULT_K, value_parser = positive_usize, env = "XDSD_K")]
    pub k: usize,
    /// Library neighbours per database feature [reference setting].
    #[arg(long = "k-prime", default_value_t = MinerConfig::DEFAULT_K_PRIME, value_parser = positive_usize, env = "XDSD_K_PRIME")]
    pub k_prime: usize,
    /// Truncation distance: similarity is max(D0^2 - d^2, 0) [reference setting].
    #[arg(long, default_value_t = MinerConfig::DEFAULT_D0, value_parser = positive_f64, env = "XDSD_D0")]
    pub d0: f64,
    /// Skip library features that come from the image being described.
    #[arg(long, env = "XDSD_EXCLUDE_SAME_SOURCE")]
    pub exclude_same_source: bool,
}

impl MinerArgs {
    pub fn config(&self) -> MinerConfig {
        MinerConfig {
            k: self.k,
            k_prime: self.k_prime,
            d0: self.d0,
            exclude_same_source: self.exclude_same_source,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct VocabArgs {
    /// Library variant: cd (other seasons and routes), cs (other seasons), cr (other routes), full [reference setting: cd].
    #[arg(long, default_value = "cd", env = "XDSD_VOCAB")]
    pub vocab: VocabKind,
    /// Season(s) the library must avoid [default: seasons of the query and database images].
    #[arg(long = "query-season", value_delimiter = ',')]
    pub query_season: Vec<Season>,
    /// Route(s) the library must avoid [default: routes of the query and database images].
    #[arg(long = "query-route", value_delimiter = ',')]
    pub query_route: Vec<u32>,
}

#[derive(Debug, Clone, Args)]
pub struct BowArgs {
    /// Vocabulary size W [desk-scale default; the reference setting uses 10000].
    #[arg(long, default_value_t = 1000, value_parser = positive_usize, env = "XDSD_WORDS")]
    pub words: usize,
    /// k-means seed.
    #[arg(long, default_value_t = 0, env = "XDSD_SEED")]
    pub seed: u64,
    /// k-means iteration cap.
    #[arg(long, default_value_t = 50, value_parser = positive_usize)]
    pub max_iters: usize,
}

#[derive(Debug, Args)]
pub struct BuildLibraryArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct IndexArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Library file [default: <output-dir>/library.xdlb].
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[command(flatten)]
    pub miner: MinerArgs,
    /// Spatial pyramid depth L [reference setting].
    #[arg(long, default_value_t = PyramidConfig::DEFAULT_LEVELS, value_parser = levels, env = "XDSD_LEVELS")]
    pub levels: u8,
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Index file, or a directory holding index.xdix.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long = "query-manifest")]
    pub query_manifest: PathBuf,
    /// Library file [default: library.xdlb next to the index].
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[command(flatten)]
    pub miner: MinerArgs,
    /// Pyramid depth used for matching; 0 gives plain image-to-class (NBNN) scoring [reference setting: 2].
    #[arg(long, default_value_t = PyramidConfig::DEFAULT_LEVELS, value_parser = levels, env = "XDSD_LEVELS")]
    pub levels: u8,
    /// Ranked images kept per query in the JSON report.
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Sub-image pairs reported for each query's best image.
    #[arg(long, default_value_t = 5)]
    pub subimages: usize,
    /// Writes rankings.tsv and query_report.json here; rankings go to stdout otherwise.
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Methods to run.
    #[arg(long, value_delimiter = ',', default_value = "cd-sd,nbnn-sd,tfidf")]
    pub methods: Vec<Method>,
    #[command(flatten)]
    pub miner: MinerArgs,
    /// Spatial pyramid depth L for cd-sd [reference setting].
    #[arg(long, default_value_t = PyramidConfig::DEFAULT_LEVELS, value_parser = levels, env = "XDSD_LEVELS")]
    pub levels: u8,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub bow: BowArgs,
    /// Sub-image pairs reported per query.
    #[arg(long, default_value_t = 5)]
    pub subimages: usize,
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub bow: BowArgs,
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenWorldArgs {
    #[arg(long, default_value_t = 120, value_parser = positive_usize)]
    pub places: usize,
    #[arg(long, default_value_t = 100)]
    pub queries: usize,
    #[arg(long, default_value_t = 60, value_parser = positive_usize)]
    pub features: usize,
    #[arg(long, default_value_t = 16, value_parser = positive_usize)]
    pub dim: usize,
    #[arg(long, default_value_t = 120)]
    pub library_places: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
    pub routes: u32,
    /// Additive descriptor noise, byte scale.
    #[arg(long, default_value_t = 30.0, value_parser = non_negative_f64)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.15, value_parser = non_negative_f64)]
    pub gain_spread: f64,
    #[arg(long, default_value_t = 0.1, value_parser = rate)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.1, value_parser = rate)]
    pub replacement: f64,
    #[arg(long, default_value_t = 0.01, value_parser = non_negative_f64)]
    pub jitter: f64,
    /// Identity transforms: every query equals its database twin.
    #[arg(long)]
    pub noiseless: bool,
    /// Add position-shuffled copies of the query places' database images.
    #[arg(long)]
    pub layout_distractors: bool,
    #[arg(long, default_value = "SU")]
    pub query_season: Season,
    #[arg(long, default_value = "WI")]
    pub database_season: Season,
    #[arg(long, default_value_t = 0, env = "XDSD_SEED")]
    pub seed: u64,
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Library file; built from the manifest with --vocab when absent.
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[command(flatten)]
    pub vocab: VocabArgs,
    #[command(flatten)]
    pub miner: MinerArgs,
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct SubimageArgs {
    /// Index file, or a directory holding index.xdix.
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long = "query-manifest")]
    pub query_manifest: PathBuf,
    /// Library file [default: library.xdlb next to the index].
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long)]
    pub query_id: u64,
    /// Database image to compare against [default: the query's top-ranked image].
    #[arg(long)]
    pub image_id: Option<u64>,
    #[arg(long, default_value_t = 5)]
    pub top: usize,
    #[command(flatten)]
    pub miner: MinerArgs,
    #[arg(long, default_value_t = PyramidConfig::DEFAULT_LEVELS, value_parser = levels, env = "XDSD_LEVELS")]
    pub levels: u8,
    #[arg(long, env = "XDSD_OUTPUT_DIR")]
    pub output_dir: Option<PathBuf>,
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.render().to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            let first = first.trim_start_matches("error: ");
            eprintln!("error\tusage\t{}", one_line(first));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error\tusage\t{}", one_line(&e.to_string()));
            return ExitCode::from(2);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error\t{}\t{}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
