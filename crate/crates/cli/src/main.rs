mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geotrec_core::corpus::SplitMode;
use geotrec_core::enrichment::Bucket;
use geotrec_core::losses::AuxKind;
use geotrec_core::model::Architecture;
use geotrec_core::synth::SynthMode;

use crate::config::ProviderKind;

#[derive(Parser, Debug)]
#[command(name = "geotrec", version, about = "Geo-temporal context enrichment and context-aware sequential recommendation")]
pub struct Cli {
    /// TOML or JSON run configuration; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic interaction log with item metadata and planted embeddings.
    Synth(SynthArgs),
    /// Resolve one geo-temporal context per (time bucket, location) through a provider.
    Enrich(EnrichArgs),
    /// Encode item metadata and cached contexts with the deterministic mock encoder.
    MockEmbed(MockEmbedArgs),
    /// Rank items by context/metadata dot product and compare HR@k to random.
    Diagnose(DiagnoseArgs),
    /// Train a recommender variant and write its best-validation checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the held-out targets of a split.
    Eval(EvalArgs),
    /// Build a percentage-improvement table from metric reports.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_from_str::<SynthMode>)]
    pub mode: Option<SynthMode>,
    #[arg(long)]
    pub users: Option<usize>,
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct EnrichArgs {
    /// Interaction log (JSONL).
    #[arg(long, visible_alias = "input")]
    pub log: PathBuf,
    /// Context cache (JSONL); read if present and rewritten with new contexts.
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long, value_parser = ["mock", "replay", "http"])]
    pub provider: Option<String>,
    /// Recorded prompt/response pairs for the replay provider.
    #[arg(long)]
    pub replay: Option<PathBuf>,
    /// Seed of the mock provider.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_from_str::<Bucket>)]
    pub bucket: Option<Bucket>,
    #[arg(long)]
    pub template: Option<String>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Report unresolved keys instead of failing.
    #[arg(long)]
    pub allow_misses: bool,
    /// Use this location for every interaction.
    #[arg(long)]
    pub location_override: Option<String>,
}

#[derive(Args, Debug)]
pub struct MockEmbedArgs {
    /// Item metadata (JSONL with item_id, title, genres).
    #[arg(long)]
    pub items: Option<PathBuf>,
    /// Context cache written by `enrich`.
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long, requires = "items")]
    pub out_items: Option<PathBuf>,
    #[arg(long, requires = "contexts")]
    pub out_contexts: Option<PathBuf>,
    /// Output when exactly one of --items / --contexts is given.
    #[arg(long, conflicts_with_all = ["out_items", "out_contexts"])]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub template: Option<String>,
}

#[derive(Args, Debug)]
pub struct DiagnoseArgs {
    /// Item metadata embeddings.
    #[arg(long)]
    pub items: PathBuf,
    /// Geo-temporal context embeddings.
    #[arg(long)]
    pub contexts: PathBuf,
    #[arg(long)]
    pub log: PathBuf,
    /// Cutoffs, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_from_str::<Bucket>)]
    pub bucket: Option<Bucket>,
    #[arg(long)]
    pub samples_per_user: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Where the log and embeddings come from.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Directory holding log.jsonl and optionally items.gtemb / contexts.gtemb.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Interaction log; defaults to <data>/log.jsonl.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Item metadata embeddings; defaults to <data>/items.gtemb when present.
    #[arg(long)]
    pub items: Option<PathBuf>,
    /// Context embeddings; defaults to <data>/contexts.gtemb when present.
    #[arg(long)]
    pub contexts: Option<PathBuf>,
    #[arg(long, value_parser = parse_from_str::<SplitMode>)]
    pub split: Option<SplitMode>,
    #[arg(long, value_parser = parse_from_str::<Bucket>)]
    pub bucket: Option<Bucket>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_parser = parse_from_str::<Architecture>)]
    pub variant: Option<Architecture>,
    #[arg(long, value_parser = parse_from_str::<AuxKind>)]
    pub aux_kind: Option<AuxKind>,
    /// Use context vectors during training only.
    #[arg(long)]
    pub gt_train_only: bool,
    #[arg(long)]
    pub lambda_aux: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub grad_check: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Use context vectors at inference (default: as trained).
    #[arg(long)]
    pub with_context: Option<bool>,
    /// Drop already-consumed items from the ranking (default: on for explorer).
    #[arg(long)]
    pub filter_seen: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    pub k: Option<Vec<usize>>,
    /// Report JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Baseline metrics report.
    #[arg(long)]
    pub baseline: PathBuf,
    /// Variant metrics reports.
    #[arg(long, num_args = 1.., required = true)]
    pub reports: Vec<PathBuf>,
    /// Output prefix; writes <out>.txt, <out>.csv and <out>.json.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_from_str<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

impl ProviderKind {
    fn parse(s: &str) -> Self {
        match s {
            "replay" => ProviderKind::Replay,
            "http" => ProviderKind::Http,
            _ => ProviderKind::Mock,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            for cause in e.chain().skip(1) {
                eprintln!("  caused by: {cause}");
            }
            if let Some(hint) = commands::hint(&e) {
                eprintln!("hint: {hint}");
            }
            ExitCode::FAILURE
        }
    }
}
