mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qapair::lengthdecode::BucketTag;
use qapair::pipelines::Variant;

#[derive(Parser, Debug)]
#[command(name = "qapair", version, about = "Build, train, generate and evaluate summary-centric QA pairs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_parser = parse_variant)]
    variant: Option<Variant>,
    /// Restrict generation to one bucket (LB0, LB1 or LB2).
    #[arg(long, global = true, value_parser = parse_bucket)]
    bucket: Option<BucketTag>,
    /// Output directory; falls back to the `reports` config key, then ".".
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter articles and build the four-tuple dataset.
    BuildDataset {
        #[arg(long)]
        articles: Option<PathBuf>,
    },
    /// Train the question and answer generators of a variant.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Generate one QA pair per article and bucket.
    Generate {
        #[arg(long)]
        articles: Option<PathBuf>,
        /// Directory holding the trained checkpoints.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
    },
    /// Score generated pairs.
    Evaluate {
        #[arg(long)]
        pairs: Option<PathBuf>,
        #[arg(long)]
        references: Option<PathBuf>,
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
    /// Pick the classifier threshold reaching the target dev precision.
    CalibrateThreshold {
        #[arg(long)]
        dev: Option<PathBuf>,
    },
    /// Majority-vote annotations and report accuracies with intervals.
    AggregateAnnotations {
        #[arg(long)]
        annotations: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: qapair::Error| e.to_string())
}

fn parse_bucket(s: &str) -> Result<BucketTag, String> {
    s.parse().map_err(|e: qapair::Error| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(|e| e.downcast_ref::<qapair::Error>())
        .map_or(2, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match commands::run(&cli.common, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
