use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use peb_core::analysis::ContributionReport;
use peb_core::backend::{
    Backend, HttpBackend, HttpConfig, MockBackend, ENV_BACKEND_URL, MOCK_DEFAULT_HIDDEN_SIZE, MOCK_DEFAULT_LAYERS,
};
use peb_core::datasets::{import_senteval, BenchmarkName, ENV_DATA_DIR};
use peb_core::eval::{
    analyze_tokens, eval_align_uniform, eval_sts, parse_counts, sweep_mask_templates, Aggregation, DataLayout,
    DataSource, RunConfig, TemplateRun, DEFAULT_ALIGN_THRESHOLD, DEFAULT_BATCH_SIZE,
};
use peb_core::report::OutputFormat;
use peb_core::store::{Store, ENV_CACHE_DIR};
use peb_core::templates::{Eos, Registry};
use peb_core::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "peb", version, about = "Prompt-based sentence embeddings and STS evaluation")]
struct Cli {
    /// Backend: an http(s) sidecar URL, or `mock[:SEED]`.
    #[arg(long, global = true, env = ENV_BACKEND_URL)]
    backend: Option<String>,

    /// Hidden size of the mock backend.
    #[arg(long, global = true, default_value_t = MOCK_DEFAULT_HIDDEN_SIZE)]
    mock_dim: usize,

    /// Layer count of the mock backend.
    #[arg(long, global = true, default_value_t = MOCK_DEFAULT_LAYERS)]
    mock_layers: usize,

    /// Make the mock behave like a causal model without a mask token.
    #[arg(long, global = true)]
    mock_causal: bool,

    /// Embedding cache directory.
    #[arg(long, global = true, env = ENV_CACHE_DIR)]
    cache: Option<PathBuf>,

    /// Ignore the cache even if one is configured.
    #[arg(long, global = true)]
    no_cache: bool,

    /// Dataset root.
    #[arg(long, global = true, env = ENV_DATA_DIR)]
    data: Option<PathBuf>,

    /// Layout of the dataset root.
    #[arg(long, global = true, value_enum, default_value_t = LayoutArg::Normalized)]
    layout: LayoutArg,

    /// Additional templates from a TOML file.
    #[arg(long, global = true)]
    template_file: Option<PathBuf>,

    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Markdown)]
    format: FormatArg,

    /// Write the report here instead of stdout.
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,

    /// Stamp the current time into report metadata (makes output vary between runs).
    #[arg(long, global = true)]
    timestamp: bool,

    #[arg(long, global = true, default_value_t = DEFAULT_BATCH_SIZE)]
    batch_size: usize,

    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spearman x100 of each template on each benchmark.
    Eval(EvalArgs),
    /// Embedding-space metrics.
    #[command(subcommand)]
    Metrics(MetricsCommand),
    /// STS-B dev scores over a grid of mask counts and terminal characters.
    SweepMask(SweepArgs),
    /// Per-token contribution to a sentence embedding.
    Analyze(AnalyzeArgs),
    /// Convert a SentEval data tree into the normalized layout.
    Import(ImportArgs),
    /// Inspect the embedding cache.
    #[command(subcommand)]
    Cache(CacheCommand),
    /// List known templates.
    Templates,
}

#[derive(Args)]
struct TemplateArgs {
    /// Comma-separated template ids.
    #[arg(long, value_delimiter = ',', default_value = "prompt_eol")]
    templates: Vec<String>,

    /// Hidden layer; defaults per template (-1, or -2 for the CoT and knowledge templates).
    #[arg(long, allow_hyphen_values = true)]
    layer: Option<i32>,

    /// L2-normalize sentence vectors before scoring.
    #[arg(long)]
    normalize: bool,

    /// `all` (the seven benchmarks), `every` (adds STS-B dev), or a comma list.
    #[arg(long, default_value = "all")]
    benchmarks: String,

    #[arg(long, value_enum, default_value_t = AggregationArg::All)]
    aggregation: AggregationArg,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: TemplateArgs,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Alignment and uniformity on STS-B test, next to average Spearman.
    AlignUniform {
        #[command(flatten)]
        common: TemplateArgs,
        /// Minimum gold score for a pair to count as similar.
        #[arg(long, default_value_t = DEFAULT_ALIGN_THRESHOLD)]
        threshold: f64,
    },
}

#[derive(Args)]
struct SweepArgs {
    /// Mask counts: `1..4` or `1,2,3`.
    #[arg(long, default_value = "1..4")]
    counts: String,

    /// Terminal characters: none, sep, period, bang, question.
    #[arg(long, value_delimiter = ',', default_value = "none,sep,period,bang,question")]
    eos: Vec<String>,

    #[arg(long, allow_hyphen_values = true, default_value_t = -1)]
    layer: i32,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    sentence: String,

    /// Comma-separated core words.
    #[arg(long, value_delimiter = ',')]
    core: Vec<String>,

    #[arg(long, default_value = "prompt_eol")]
    template: String,

    #[arg(long, allow_hyphen_values = true)]
    layer: Option<i32>,

    /// Merge sub-word tokens into whole words by offset.
    #[arg(long)]
    merge_words: bool,
}

#[derive(Args)]
struct ImportArgs {
    #[arg(long, value_enum, default_value_t = ImportLayout::Senteval)]
    from: ImportLayout,
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    dst: PathBuf,
}

#[derive(Subcommand)]
enum CacheCommand {
    Stats,
    Verify,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Normalized,
    Senteval,
}

#[derive(Clone, Copy, ValueEnum)]
enum ImportLayout {
    Senteval,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Markdown,
    Csv,
    Json,
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregationArg {
    All,
    Mean,
}

impl From<FormatArg> for OutputFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Markdown => OutputFormat::Markdown,
            FormatArg::Csv => OutputFormat::Csv,
            FormatArg::Json => OutputFormat::Json,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.kind().exit_code() as u8)
        }
    }
}

fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Eval(args) => {
            let backend = open_backend(cli)?;
            let config = run_config(cli, &args.common, backend.as_ref())?;
            let store = open_store(cli)?;
            let report = eval_sts(&config, backend.as_ref(), store.as_ref())?;
            emit(cli, &report.render(cli.format.into()))?;
            for (row, cell) in report.failures() {
                log::error!("{} on {} failed", row.template_id, cell.benchmark);
            }
            Ok(report.exit_code())
        }
        Command::Metrics(MetricsCommand::AlignUniform { common, threshold }) => {
            let backend = open_backend(cli)?;
            let config = run_config(cli, common, backend.as_ref())?;
            let store = open_store(cli)?;
            let report = eval_align_uniform(&config, backend.as_ref(), store.as_ref(), *threshold)?;
            emit(cli, &report.render(cli.format.into()))?;
            Ok(0)
        }
        Command::SweepMask(args) => {
            let counts = parse_counts(&args.counts)?;
            let eos = args
                .eos
                .iter()
                .map(|e| Eos::parse(e).ok_or_else(|| Error::Config(format!("unknown terminal character `{e}`"))))
                .collect::<Result<Vec<_>>>()?;
            let backend = open_backend(cli)?;
            let mut config = RunConfig::new(Vec::new(), vec![BenchmarkName::StsbDev], data_source(cli)?);
            config.batch_size = cli.batch_size;
            config.generated_at = timestamp(cli);
            let store = open_store(cli)?;
            let report = sweep_mask_templates(&config, backend.as_ref(), store.as_ref(), &counts, &eos, args.layer)?;
            emit(cli, &report.render(cli.format.into()))?;
            Ok(0)
        }
        Command::Analyze(args) => {
            let registry = registry(cli)?;
            let template = registry.lookup(&args.template)?;
            let backend = open_backend(cli)?;
            let run = TemplateRun::new(template, args.layer, false);
            let core: Vec<&str> = args.core.iter().map(|s| s.trim()).filter(|s| !s.is_empty()).collect();
            let report = analyze_tokens(backend.as_ref(), &run, &args.sentence, &core, args.merge_words)?;
            let text = match cli.format {
                FormatArg::Markdown => contribution_markdown(&report),
                FormatArg::Csv => report.to_csv(),
                FormatArg::Json => report.to_json(),
            };
            emit(cli, &text)?;
            Ok(0)
        }
        Command::Import(args) => {
            let ImportLayout::Senteval = args.from;
            let outcomes = import_senteval(&args.src, &args.dst);
            let mut code = 0;
            for o in &outcomes {
                match &o.result {
                    Ok((pairs, dropped)) => println!("{}: {pairs} pairs imported, {dropped} dropped", o.name),
                    Err(e) => {
                        eprintln!("{}: {e}", o.name);
                        code = ErrorKind::Data.exit_code();
                    }
                }
            }
            Ok(code)
        }
        Command::Cache(cmd) => {
            let dir = cli
                .cache
                .as_ref()
                .ok_or_else(|| Error::Config(format!("no cache directory; pass --cache or set {ENV_CACHE_DIR}")))?;
            if !dir.join("records.log").exists() {
                return Err(Error::Config(format!("{} is not an embedding cache", dir.display())));
            }
            let store = Store::open_read_only(dir)?;
            match cmd {
                CacheCommand::Stats => {
                    let stats = store.stats()?;
                    let text = match cli.format {
                        FormatArg::Json => serde_json::to_string_pretty(&stats).expect("stats serialize") + "\n",
                        _ => {
                            let mut s = format!("records: {}\nlog bytes: {}\n", stats.records, stats.log_bytes);
                            for (group, n) in &stats.groups {
                                let _ = writeln!(s, "{group}: {n}");
                            }
                            s
                        }
                    };
                    emit(cli, &text)?;
                    Ok(0)
                }
                CacheCommand::Verify => {
                    let report = store.verify()?;
                    let text = match cli.format {
                        FormatArg::Json => serde_json::to_string_pretty(&report).expect("verify serialize") + "\n",
                        _ => {
                            let mut s = format!(
                                "records ok: {}\ncorrupt records: {}\ntruncated tail bytes: {}\nduplicate keys: {}\nindex consistent: {}\n",
                                report.records_ok,
                                report.corrupt.len(),
                                report.torn_tail_bytes,
                                report.duplicate_keys,
                                report.index_consistent
                            );
                            for (offset, reason) in &report.corrupt {
                                let _ = writeln!(s, "  offset {offset}: {reason}");
                            }
                            s
                        }
                    };
                    emit(cli, &text)?;
                    Ok(if report.is_clean() {
                        0
                    } else {
                        ErrorKind::Data.exit_code()
                    })
                }
            }
        }
        Command::Templates => {
            let registry = registry(cli)?;
            let mut s = String::new();
            for t in registry.templates() {
                let _ = writeln!(s, "{}\t{}\t{}\t{}", t.id(), t.family(), t.capture(), t.pattern());
            }
            s.push_str("mask<N>_<none|sep|period|bang|question>\tdiscriminative\tmask:N\t(generated)\n");
            emit(cli, &s)?;
            Ok(0)
        }
    }
}

fn registry(cli: &Cli) -> Result<Registry> {
    let mut registry = Registry::default();
    if let Some(path) = &cli.template_file {
        registry.load_file(path)?;
    }
    Ok(registry)
}

fn open_backend(cli: &Cli) -> Result<Box<dyn Backend>> {
    let spec = cli
        .backend
        .as_deref()
        .ok_or_else(|| Error::Config(format!("no backend; pass --backend or set {ENV_BACKEND_URL}")))?;
    if let Some(rest) = spec.strip_prefix("mock") {
        let seed = match rest.strip_prefix(':') {
            Some(s) => s
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("bad mock seed `{s}`")))?,
            None if rest.is_empty() => 0,
            None => return Err(Error::Config(format!("unrecognized backend `{spec}`"))),
        };
        if cli.mock_dim == 0 || cli.mock_layers == 0 {
            return Err(Error::Config("mock dimensions must be positive".into()));
        }
        let mock = MockBackend::with_shape(seed, cli.mock_dim, cli.mock_layers);
        return Ok(Box::new(if cli.mock_causal {
            mock.without_mask_token()
        } else {
            mock
        }));
    }
    if !(spec.starts_with("http://") || spec.starts_with("https://")) {
        return Err(Error::Config(format!("unrecognized backend `{spec}`")));
    }
    Ok(Box::new(HttpBackend::connect(spec, HttpConfig::from_env())?))
}

fn open_store(cli: &Cli) -> Result<Option<Store>> {
    match (&cli.cache, cli.no_cache) {
        (Some(dir), false) => Ok(Some(Store::open(dir)?)),
        _ => Ok(None),
    }
}

fn data_source(cli: &Cli) -> Result<DataSource> {
    let root = cli
        .data
        .clone()
        .ok_or_else(|| Error::Config(format!("no dataset root; pass --data or set {ENV_DATA_DIR}")))?;
    let layout = match cli.layout {
        LayoutArg::Normalized => DataLayout::Normalized,
        LayoutArg::Senteval => DataLayout::Senteval,
    };
    Ok(DataSource { root, layout })
}

fn parse_benchmarks(s: &str) -> Result<Vec<BenchmarkName>> {
    match s.trim().to_ascii_lowercase().as_str() {
        "all" | "seven" => Ok(BenchmarkName::SEVEN.to_vec()),
        "every" => Ok(BenchmarkName::ALL.to_vec()),
        _ => {
            let mut v: Vec<BenchmarkName> = s
                .split(',')
                .map(|b| b.trim().parse::<BenchmarkName>().map_err(Error::from))
                .collect::<Result<_>>()?;
            v.sort();
            v.dedup();
            Ok(v)
        }
    }
}

fn run_config(cli: &Cli, args: &TemplateArgs, backend: &dyn Backend) -> Result<RunConfig> {
    let registry = registry(cli)?;
    let runs = args
        .templates
        .iter()
        .map(|id| {
            Ok(TemplateRun::new(
                registry.lookup(id.trim())?,
                args.layer,
                args.normalize,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    if runs
        .iter()
        .any(|r| r.template.capture() != peb_core::templates::CaptureRule::LastToken)
        && !backend.descriptor().is_mask_capable()
    {
        return Err(Error::BackendNotMaskCapable(backend.descriptor().model_id.clone()));
    }
    let mut config = RunConfig::new(runs, parse_benchmarks(&args.benchmarks)?, data_source(cli)?);
    config.aggregation = match args.aggregation {
        AggregationArg::All => Aggregation::All,
        AggregationArg::Mean => Aggregation::Mean,
    };
    config.batch_size = cli.batch_size;
    config.generated_at = timestamp(cli);
    config.validate()?;
    Ok(config)
}

fn timestamp(cli: &Cli) -> Option<u64> {
    cli.timestamp
        .then(|| SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()))
}

fn contribution_markdown(report: &ContributionReport) -> String {
    let mut s = format!(
        "# Token contributions\n\n- sentence: {}\n- template: {}\n- layer: {}\n- core mass: {:.4}\n\n| Token | Span | Similarity | Proportion | Class |\n|---|---|---:|---:|---|\n",
        report.sentence, report.template_id, report.layer, report.core_mass
    );
    for c in &report.contributions {
        let _ = writeln!(
            s,
            "| {} | {}-{} | {:.4} | {:.4} | {} |",
            c.token,
            c.span.0,
            c.span.1,
            c.similarity,
            c.proportion,
            c.cls.as_str()
        );
    }
    s
}

fn emit(cli: &Cli, text: &str) -> Result<()> {
    match &cli.output {
        Some(path) => write_file(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::Config(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}
