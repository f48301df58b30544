use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use halleval::client::ClientError;
use halleval::dataset::{self, MappingSpec};
use halleval::report::{emit_table, verify_tables, TableFormat};
use halleval::runner::{
    compare_runs, load_records, run_eval, summarize, BackendKind, ItemFilter, RunConfigFile,
    RunError, RunIdentity, RunResult,
};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;
const EXIT_VERIFY: u8 = 4;

/// Yes/no VQA hallucination benchmark harness.
#[derive(Debug, Parser)]
#[command(name = "halleval", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Evaluate one template over a dataset.
    Run(Box<RunArgs>),
    /// Compare two completed runs over the same items.
    Compare(CompareArgs),
    /// Write a class-balanced sample of a canonical dataset.
    Sample(SampleArgs),
    /// Score a records file.
    Metrics(MetricsArgs),
    /// Re-derive the bundled published rows and report each cell.
    VerifyPaper(VerifyArgs),
    /// Convert a benchmark's native file into canonical records.
    Adapt(AdaptArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Markdown,
    Csv,
    Tsv,
    Json,
}

impl From<Format> for TableFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Text => TableFormat::Text,
            Format::Markdown => TableFormat::Markdown,
            Format::Csv => TableFormat::Delimited(','),
            Format::Tsv => TableFormat::Delimited('\t'),
            Format::Json => TableFormat::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Backend {
    Openai,
    Replay,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Flat TOML file of run settings; flags override its fields.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    subtask: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    template: Option<String>,
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<Backend>,
    #[arg(long)]
    replay_fixture: Option<PathBuf>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[arg(long)]
    api_key_env: Option<String>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    max_tokens: Option<u32>,
    #[arg(long)]
    n_per_class: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    image_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

impl RunArgs {
    fn overrides(&self) -> RunConfigFile {
        RunConfigFile {
            dataset: self.dataset.clone(),
            split: self.split.clone(),
            subtask: self.subtask.clone(),
            mode: self.mode.clone(),
            template: self.template.clone(),
            templates_dir: self.templates_dir.clone(),
            backend: self.backend.map(|b| match b {
                Backend::Openai => BackendKind::Openai,
                Backend::Replay => BackendKind::Replay,
            }),
            replay_fixture: self.replay_fixture.clone(),
            base_url: self.base_url.clone(),
            model: self.model.clone(),
            api_key_env: self.api_key_env.clone(),
            timeout_secs: self.timeout_secs,
            max_retries: self.max_retries,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            n_per_class: self.n_per_class,
            seed: self.seed,
            concurrency: self.concurrency,
            output_dir: self.output_dir.clone(),
            cache: self.cache.clone(),
            image_root: self.image_root.clone(),
        }
    }
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Run id, run directory, or result.json of the baseline run.
    baseline: String,
    treated: String,
    /// Directory holding run directories named by run id.
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    n_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    subtask: Option<String>,
    #[arg(long)]
    mode: Option<String>,
    /// Canonical file to write; its manifest is written alongside.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// records.jsonl of a run; the run's config.json must sit beside it.
    records: PathBuf,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// Native benchmark file.
    #[arg(long)]
    source: PathBuf,
    /// TOML or JSON mapping spec.
    #[arg(long)]
    mapping: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// A failure with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(error: E) -> Self {
        let error = error.into();
        Failure {
            code: exit_code(&error),
            error,
        }
    }
}

fn exit_code(error: &anyhow::Error) -> u8 {
    match error.downcast_ref::<RunError>() {
        Some(RunError::Client(
            ClientError::RetriesExhausted { .. } | ClientError::Fatal { .. },
        )) => EXIT_TRANSPORT,
        _ => EXIT_DATA,
    }
}

type CmdResult = Result<u8, Failure>;

fn print_json(value: serde_json::Result<serde_json::Value>) -> Result<(), Failure> {
    println!("{}", serde_json::to_string_pretty(&value?)?);
    Ok(())
}

async fn cmd_run(args: RunArgs) -> CmdResult {
    let file = match &args.config {
        Some(path) => RunConfigFile::load(path)?,
        None => RunConfigFile::default(),
    };
    let config = file.overlay(args.overrides()).resolve()?;
    let outcome = run_eval(&config).await?;
    let result = &outcome.result;
    eprintln!(
        "run {}: {} trials, {} failed, {} unresolved; {} backend calls, {} cache hits; {}",
        result.run_id,
        result.trial_count,
        result.failed_count,
        result.unresolved_count,
        outcome.stats.backend_calls,
        outcome.stats.cache_hits,
        outcome.run_dir.display()
    );
    print!("{}", emit_table(&[result.into()], args.format.into())?);
    if result.is_final {
        Ok(0)
    } else {
        let first = outcome
            .records
            .iter()
            .find_map(|r| r.error.as_deref())
            .unwrap_or("");
        eprintln!(
            "run is not final: {} trial(s) failed; first error: {first}",
            result.failed_count
        );
        Ok(EXIT_TRANSPORT)
    }
}

fn locate_result(arg: &str, runs_dir: &Path) -> PathBuf {
    let path = PathBuf::from(arg);
    if path.is_file() {
        path
    } else if path.is_dir() {
        path.join("result.json")
    } else {
        runs_dir.join(arg).join("result.json")
    }
}

fn cmd_compare(args: CompareArgs) -> CmdResult {
    let baseline = RunResult::load(&locate_result(&args.baseline, &args.runs_dir))?;
    let treated = RunResult::load(&locate_result(&args.treated, &args.runs_dir))?;
    let comparison = compare_runs(&baseline, &treated)?;
    if let Format::Json = args.format {
        print_json(serde_json::to_value(&comparison))?;
        return Ok(0);
    }
    print!(
        "{}",
        emit_table(&[(&baseline).into(), (&treated).into()], args.format.into())?
    );
    for row in &comparison.aggregates {
        match &row.delta {
            Some(d) => println!("{}: macro F1 Δ {:+.2}%", row.key.label(), d.delta_percent),
            None => println!(
                "{}: macro F1 Δ undefined (baseline macro F1 is 0)",
                row.key.label()
            ),
        }
    }
    Ok(0)
}

fn cmd_sample(args: SampleArgs) -> CmdResult {
    let (items, _) = dataset::load_canonical(&args.dataset)?;
    let filter = ItemFilter {
        split: args.split,
        subtask: args.subtask,
        mode: args.mode,
    };
    let selected: Vec<_> = items.into_iter().filter(|i| filter.accepts(i)).collect();
    let sample = dataset::balanced_sample(&selected, args.n_per_class, args.seed)?;
    let manifest = dataset::write_canonical(&args.out, &sample)?;
    eprintln!(
        "wrote {} items ({} per class, seed {}) to {}; checksum {}",
        sample.len(),
        args.n_per_class,
        args.seed,
        args.out.display(),
        manifest.checksum()
    );
    Ok(0)
}

fn cmd_metrics(args: MetricsArgs) -> CmdResult {
    let records = load_records(&args.records)?;
    let config_path = args.records.with_file_name("config.json");
    let text = std::fs::read_to_string(&config_path).with_context(|| {
        format!(
            "{}: run config expected beside the records",
            config_path.display()
        )
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("{}", config_path.display()))?;
    let identity: RunIdentity = serde_json::from_value(value["identity"].clone())
        .with_context(|| format!("{}: no run identity", config_path.display()))?;
    let result = summarize(identity, &records)?;
    if let Format::Json = args.format {
        print_json(serde_json::to_value(&result))?;
    } else {
        print!("{}", emit_table(&[(&result).into()], args.format.into())?);
    }
    if result.failed_count > 0 {
        eprintln!(
            "{} failed trial(s) excluded from the scores",
            result.failed_count
        );
    }
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> CmdResult {
    let report = verify_tables();
    match args.format {
        Format::Json => print_json(serde_json::to_value(&report))?,
        _ => print!("{}", report.render_text()),
    }
    Ok(if report.has_failures() {
        EXIT_VERIFY
    } else {
        0
    })
}

fn cmd_adapt(args: AdaptArgs) -> CmdResult {
    let spec = MappingSpec::load(&args.mapping)?;
    let report = dataset::adapt(&args.source, &spec, &args.out)?;
    for rejected in &report.rejected {
        eprintln!("record {}: {}", rejected.record, rejected.message);
    }
    eprintln!(
        "wrote {} of {} records to {}; {} rejected",
        report.written,
        report.total,
        args.out.display(),
        report.rejected.len()
    );
    Ok(0)
}

async fn dispatch(command: Command) -> CmdResult {
    match command {
        Command::Run(args) => cmd_run(*args).await,
        Command::Compare(args) => cmd_compare(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Metrics(args) => cmd_metrics(args),
        Command::VerifyPaper(args) => cmd_verify(args),
        Command::Adapt(args) => cmd_adapt(args),
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match dispatch(cli.command).await {
        Ok(code) => ExitCode::from(code),
        Err(Failure { code, error }) => {
            eprintln!("error: {error:#}");
            ExitCode::from(code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::anyhow;
    use halleval::dataset::DatasetError;

    #[test]
    fn transport_errors_map_to_exit_3() {
        let err = anyhow!(RunError::Client(ClientError::RetriesExhausted {
            attempts: vec![]
        }));
        assert_eq!(exit_code(&err), EXIT_TRANSPORT);
        let err = anyhow!(RunError::Client(ClientError::MissingCredential("K".into())));
        assert_eq!(exit_code(&err), EXIT_DATA);
        let err = anyhow!(DatasetError::InsufficientClass {
            needed: 2,
            yes_available: 1,
            no_available: 1
        });
        assert_eq!(exit_code(&err), EXIT_DATA);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
