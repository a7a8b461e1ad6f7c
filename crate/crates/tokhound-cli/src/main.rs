//! Command-line front end for the under-trained-token detection pipeline.
//!
//! Exit codes: 0 success, 1 usage error, 2 stage failure, 3 backend
//! unavailable. The backend bearer token is only ever read from the
//! environment variable named by `--auth-env`; it never appears on argv.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use tokhound::fixture::{build_fixture, FixtureError};
use tokhound::indicators::IndicatorKind;
use tokhound::pipeline::{
    load_indicator_run, run_candidates, run_classify, run_indicators, run_pipeline, run_report,
    run_verify, PipelineError, RunConfig,
};
use tokhound::report::{compare_indicators, render_comparison_markdown, ReportError};
use tokhound::verify::BackendDescriptor;

#[derive(Parser)]
#[command(
    name = "tokhound",
    version,
    about = "Detects under-trained (glitch) tokens in language models",
    long_about = "Analyzes a tokenizer and embedding weights for under-trained tokens: \
                  classifies the vocabulary, ranks tokens by embedding indicators, and \
                  verifies the most suspicious candidates against a completion backend."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Inputs and the artifact directory, shared by every stage subcommand.
#[derive(Args, Clone)]
struct SharedArgs {
    /// Tokenizer definition: portable schema or serialized tokenizer JSON.
    #[arg(long, value_name = "PATH")]
    tokenizer: Option<PathBuf>,
    /// Tensor container holding the embedding table(s).
    #[arg(long, value_name = "PATH")]
    weights: Option<PathBuf>,
    /// Directory for stage artifacts and reports.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct StageArgs {
    /// Fraction of the vocabulary taken as candidates.
    #[arg(long, default_value_t = 0.02)]
    fraction: f64,
    /// Verification probability threshold.
    #[arg(long, default_value_t = 0.01)]
    threshold: f64,
    /// Force the ranking indicator (cosine-to-ref, euclidean-to-ref,
    /// input-norm, cosine-centered-to-ref, cosine-pc-removed-to-ref).
    #[arg(long, value_name = "NAME")]
    indicator: Option<IndicatorKind>,
    /// Explicit reference token ids, comma-separated; skips discovery.
    #[arg(long, value_name = "CSV", value_delimiter = ',')]
    ref_ids: Option<Vec<u32>>,
    /// Treat the embeddings as tied even if detection disagrees.
    #[arg(long, conflicts_with = "untied")]
    tied: bool,
    /// Treat the embeddings as untied even if detection disagrees.
    #[arg(long)]
    untied: bool,
    /// HTTP completion endpoint; selects the HTTP backend over the synthetic one.
    #[arg(long, value_name = "URL")]
    backend_url: Option<String>,
    /// Environment variable holding the backend bearer token.
    #[arg(long, value_name = "VAR")]
    auth_env: Option<String>,
    /// Concurrent candidates in flight during verification.
    #[arg(long, default_value_t = 4)]
    max_parallel: usize,
    /// Per-request timeout in seconds (HTTP backend).
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
    /// HTTP retries after the first failed attempt.
    #[arg(long, default_value_t = 3)]
    retries: usize,
    /// Skip verification and emit a candidates-only report.
    #[arg(long)]
    no_verify: bool,
    /// Also compute the centered and PC-removed cosine variants.
    #[arg(long)]
    variants: bool,
    /// Tensor name of the input embedding, when auto-detection fails.
    #[arg(long, value_name = "NAME")]
    input_tensor: Option<String>,
    /// Tensor name of the output embedding, when auto-detection fails.
    #[arg(long, value_name = "NAME")]
    output_tensor: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Classify every token and write taxonomy.json.
    Classify {
        #[command(flatten)]
        shared: SharedArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Compute indicator score vectors (indicators.json / indicators.bin).
    Indicators {
        #[command(flatten)]
        shared: SharedArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Select the candidate window from persisted indicators.
    Candidates {
        #[command(flatten)]
        shared: SharedArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Verify persisted candidates against the completion backend.
    Verify {
        #[command(flatten)]
        shared: SharedArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Assemble report.json and report.md from persisted artifacts.
    Report {
        #[command(flatten)]
        shared: SharedArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Run every stage end to end.
    Run {
        #[command(flatten)]
        shared: SharedArgs,
        #[command(flatten)]
        stage: StageArgs,
    },
    /// Compare persisted runs of different indicators over the same model.
    Compare {
        /// Output directories of the runs to compare.
        #[arg(value_name = "DIR", num_args = 2..)]
        dirs: Vec<PathBuf>,
    },
    /// Write the deterministic synthetic demo model (tokenizer + weights).
    Fixture {
        /// Directory to create the fixture in.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

enum CliError {
    Usage(String),
    Pipeline(PipelineError),
    Report(ReportError),
    Fixture(FixtureError),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::Pipeline(e) => write!(f, "{e}"),
            CliError::Report(e) => write!(f, "{e}"),
            CliError::Fixture(e) => write!(f, "{e}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Pipeline(PipelineError::BackendUnavailable(_)) => 3,
            _ => 2,
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        CliError::Pipeline(e)
    }
}

/// Which model inputs a subcommand actually opens.
#[derive(Clone, Copy, PartialEq)]
enum Need {
    ArtifactsOnly,
    Tokenizer,
    Both,
}

fn build_config(shared: &SharedArgs, stage: &StageArgs, need: Need) -> Result<RunConfig, CliError> {
    let tokenizer = match (&shared.tokenizer, need) {
        (Some(path), _) => path.clone(),
        (None, Need::ArtifactsOnly) => PathBuf::new(),
        (None, _) => {
            return Err(CliError::Usage(
                "this subcommand needs --tokenizer PATH".into(),
            ))
        }
    };
    let weights = match (&shared.weights, need) {
        (Some(path), _) => path.clone(),
        (None, Need::Both) => {
            return Err(CliError::Usage("this subcommand needs --weights PATH".into()))
        }
        (None, _) => PathBuf::new(),
    };

    let mut config = RunConfig::new(tokenizer, weights, shared.out.clone());
    config.fraction = stage.fraction;
    config.threshold = stage.threshold;
    config.indicator_override = stage.indicator;
    config.ref_ids = stage.ref_ids.clone();
    config.tied_override = match (stage.tied, stage.untied) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    };
    config.include_variant_indicators = stage.variants;
    config.input_tensor = stage.input_tensor.clone();
    config.output_tensor = stage.output_tensor.clone();
    config.no_verify = stage.no_verify;

    config.backend = match &stage.backend_url {
        Some(url) => {
            let mut backend = BackendDescriptor::http(url);
            backend.auth_env = stage.auth_env.clone();
            backend.timeout_seconds = stage.timeout;
            backend.retries = stage.retries;
            backend
        }
        None => BackendDescriptor::synthetic(),
    };
    config.backend.max_parallel = stage.max_parallel;
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Classify { shared, stage } => {
            let config = build_config(&shared, &stage, Need::Tokenizer)?;
            let taxonomy = run_classify(&config)?;
            let c = &taxonomy.counts;
            println!(
                "classified {} tokens: {} ok for testing, {} special, {} unreachable, {} partial UTF-8",
                taxonomy.vocab_size, c.ok_for_testing, c.special, c.unreachable, c.partial_utf8
            );
        }
        Command::Indicators { shared, stage } => {
            let config = build_config(&shared, &stage, Need::Both)?;
            let artifact = run_indicators(&config)?;
            let names: Vec<&str> = artifact.vectors.iter().map(|v| v.name.as_str()).collect();
            println!(
                "computed {} ({} reference tokens); ranking by {}",
                names.join(", "),
                artifact.reference.as_ref().map_or(0, |r| r.ids.len()),
                artifact.chosen
            );
        }
        Command::Candidates { shared, stage } => {
            let config = build_config(&shared, &stage, Need::ArtifactsOnly)?;
            let candidates = run_candidates(&config)?;
            println!(
                "selected {} candidates at fraction {} by {}",
                candidates.ids.len(),
                candidates.fraction,
                candidates.indicator
            );
        }
        Command::Verify { shared, stage } => {
            let need = if stage.backend_url.is_some() { Need::Tokenizer } else { Need::Both };
            let config = build_config(&shared, &stage, need)?;
            let artifact = run_verify(&config)?;
            let s = &artifact.summary;
            println!(
                "verified {} of {} tested ({} inconclusive) at threshold {}",
                s.confirmed, s.tested, s.inconclusive, artifact.threshold
            );
        }
        Command::Report { shared, stage } => {
            let config = build_config(&shared, &stage, Need::ArtifactsOnly)?;
            let report = run_report(&config)?;
            println!(
                "report written to {}: {} confirmed of {} candidates",
                config.output_dir.display(),
                report.summary.n_confirmed,
                report.summary.n_candidates
            );
        }
        Command::Run { shared, stage } => {
            let config = build_config(&shared, &stage, Need::Both)?;
            let report = run_pipeline(&config)?;
            let s = &report.summary;
            if config.no_verify {
                println!(
                    "selected {} candidates by {} (verification skipped); report at {}",
                    s.n_candidates,
                    s.indicator,
                    config.output_dir.join("report.md").display()
                );
            } else {
                println!(
                    "confirmed {} of {} tested ({} candidates, {} inconclusive); report at {}",
                    s.n_confirmed,
                    s.n_tested,
                    s.n_candidates,
                    s.n_inconclusive,
                    config.output_dir.join("report.md").display()
                );
            }
        }
        Command::Compare { dirs } => {
            let runs = dirs
                .iter()
                .map(|dir| load_indicator_run(dir))
                .collect::<Result<Vec<_>, _>>()?;
            let comparison = compare_indicators(&runs).map_err(CliError::Report)?;
            print!("{}", render_comparison_markdown(&comparison));
        }
        Command::Fixture { out } => {
            let info = build_fixture(&out).map_err(CliError::Fixture)?;
            println!(
                "fixture written to {}: {} tokens ({} planted untrained, ids {}..={}), \
                 embedding {}x{}",
                info.dir.display(),
                info.vocab_size,
                info.planted_ids.len(),
                info.planted_ids.first().copied().unwrap_or_default(),
                info.planted_ids.last().copied().unwrap_or_default(),
                info.n_rows,
                info.dim
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version arrive here too; they are not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = execute(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
