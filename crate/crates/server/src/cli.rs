//! `laps` subcommands. Each takes parsed arguments and writes its report to
//! the given sink so the commands can be exercised without a process.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use laps_core::dataset::{
    compute_stats, export_dataset, load_dataset, records_from_tasks, save_dataset, SplitSpec,
    StatsOptions,
};
use laps_core::extraction::Extractor;
use laps_core::llm::LlmClient;
use laps_core::orchestrator::Orchestrator;
use laps_core::synthetic::SyntheticDriver;
use laps_core::template::TemplateStore;
use laps_eval::diversity::{
    dialogues_from_generic_json, dialogues_from_records, evaluate_dataset, render_table, BleuMode,
    EvalConfig, Metric, MetricReport, RoleFilter, SelfBleuConfig, Smoothing, DEFAULT_CUTOFF,
    DEFAULT_RESAMPLES,
};
use laps_eval::recommendation::{
    evaluate_methods, EvalMethodsConfig, FixtureResolver, LiveResolver, MatchMode,
    PreferenceSource, PromptMethod, UrlResolver, DEFAULT_PAGE_BYTES, DEFAULT_RUNS,
};
use laps_eval::stats::{compare, SignificanceResult};
use serde::Serialize;
use tracing::info;

use crate::app::{load_domains, router, AppState};
use crate::config::ServerConfig;
use crate::store::TaskStore;

#[derive(Debug, Parser)]
#[command(
    name = "laps",
    version,
    about = "Preference-rich dialogue collection and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the HTTP collection server.
    Serve(ConfigArg),
    /// Collect dialogues with the LLM playing both sides.
    Synthesize(SynthesizeArgs),
    /// Write every finished task in storage as a dataset file.
    Export(ExportArgs),
    /// Dataset statistics per split.
    Stats(StatsArgs),
    /// Lexical diversity of one or more corpora.
    EvalDiversity(DiversityArgs),
    /// Preference utilization of recommendation prompting methods.
    EvalPu(PuArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML configuration; `LAPS_*` variables override it.
    #[arg(long, env = "LAPS_CONFIG")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub domain: String,
    /// Sessions per task; the domain scenario is truncated to this many.
    #[arg(long, default_value_t = 3)]
    pub sessions: u32,
    /// Number of synthetic workers.
    #[arg(long, default_value_t = 1)]
    pub runs: usize,
    #[arg(long, default_value = "synthetic")]
    pub worker_prefix: String,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub include_abandoned: bool,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CorpusFormat {
    /// Native dataset file.
    Laps,
    /// JSON list of dialogues, each a list of `{role, text}`.
    Generic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BleuModeArg {
    MultiReference,
    PerPair,
}

#[derive(Debug, Args)]
pub struct DiversityArgs {
    /// `NAME=PATH` or `PATH`; repeat to compare corpora.
    #[arg(long, required = true)]
    pub dataset: Vec<String>,
    #[arg(long, value_enum, default_value_t = CorpusFormat::Laps)]
    pub format: CorpusFormat,
    /// Comma-separated subset of dist-1, dist-2, ent-4, self-bleu.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "dist-1,dist-2,ent-4,self-bleu"
    )]
    pub metrics: Vec<Metric>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    pub resamples: usize,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    pub cutoff: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// all, user or assistant.
    #[arg(long, default_value = "all")]
    pub role: RoleFilter,
    #[arg(long, value_enum, default_value_t = BleuModeArg::MultiReference)]
    pub bleu_mode: BleuModeArg,
    #[arg(long)]
    pub smoothing: bool,
    /// Machine-readable report destination.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Standard,
    Memory,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ResolverArg {
    Live,
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatchArg {
    Substring,
    TokenBoundary,
}

#[derive(Debug, Args)]
pub struct PuArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value_t = MethodArg::Both)]
    pub method: MethodArg,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
    /// Score against validated preferences (default).
    #[arg(long, conflicts_with = "extracted_prefs")]
    pub gold_prefs: bool,
    /// Score against preferences re-extracted by the model.
    #[arg(long)]
    pub extracted_prefs: bool,
    #[arg(long, value_enum, default_value_t = ResolverArg::Fixture)]
    pub resolver: ResolverArg,
    /// JSON object of URL to page text for the fixture resolver.
    #[arg(long)]
    pub pages: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PAGE_BYTES)]
    pub page_bytes: usize,
    #[arg(long, value_enum, default_value_t = MatchArg::Substring)]
    pub match_mode: MatchArg,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> anyhow::Result<()> {
    match cli.command {
        Command::Serve(a) => serve(&ServerConfig::load(a.config.as_deref())?),
        Command::Synthesize(a) => {
            let config = ServerConfig::load(a.config.config.as_deref())?;
            synthesize(&config, config.llm.client()?, &a, out)
        }
        Command::Export(a) => export(&ServerConfig::load(a.config.config.as_deref())?, &a, out),
        Command::Stats(a) => stats(&a, out),
        Command::EvalDiversity(a) => eval_diversity(&a, out).map(|_| ()),
        Command::EvalPu(a) => {
            let config = ServerConfig::load(a.config.config.as_deref())?;
            eval_pu(&config, &config.llm.client()?, &a, out)
        }
    }
}

fn serve(config: &ServerConfig) -> anyhow::Result<()> {
    let state = Arc::new(AppState::from_config(config, config.llm.client()?)?);
    let app = router(state, config.static_dir.as_deref());
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&config.bind)
            .await
            .with_context(|| format!("binding {}", config.bind))?;
        info!(addr = %listener.local_addr()?, "listening");
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

pub fn synthesize(
    config: &ServerConfig,
    llm: LlmClient,
    args: &SynthesizeArgs,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    if args.sessions == 0 {
        bail!("--sessions must be at least 1");
    }
    let domains = load_domains(config.domains_dir.as_deref())?;
    let domain = domains
        .get(&args.domain)
        .with_context(|| format!("unknown domain `{}`", args.domain))?;
    let domain = domain.scenario_prefix(args.sessions);
    let templates = Arc::new(match &config.templates_dir {
        Some(dir) => TemplateStore::with_dir(dir)?,
        None => TemplateStore::builtin(),
    });
    let orchestrator = Orchestrator::new(
        llm.clone(),
        templates.clone(),
        config.stages.clone(),
        config.orchestrator.clone(),
    );
    let driver = SyntheticDriver::new(llm, templates, config.stages.synthetic.clone());
    let mut tasks = Vec::with_capacity(args.runs);
    for i in 0..args.runs {
        let worker = format!("{}-{}-{:04}", args.worker_prefix, args.domain, i + 1);
        let task = driver
            .run_task(&orchestrator, &domain, &worker, None)
            .with_context(|| format!("worker {worker}"))?;
        writeln!(out, "{worker}: {} sessions", task.sessions().len())?;
        tasks.push(task);
    }
    let records = records_from_tasks(&tasks, &SplitSpec::with_seed(args.split_seed))?;
    save_dataset(&args.out, &records)?;
    write!(out, "{}", compute_stats(&records, StatsOptions::default()))?;
    Ok(())
}

pub fn export(config: &ServerConfig, args: &ExportArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let tasks: Vec<_> = TaskStore::new(config.tasks_dir())
        .load_all()?
        .into_iter()
        .filter(|t| t.is_finished())
        .collect();
    let report = export_dataset(&tasks, &SplitSpec::with_seed(args.split_seed), &args.out)?;
    write!(out, "{}", report.stats)?;
    for v in &report.violations {
        writeln!(out, "violation: {v}")?;
    }
    if !report.violations.is_empty() {
        bail!("{} invariant violations in export", report.violations.len());
    }
    Ok(())
}

pub fn stats(args: &StatsArgs, out: &mut dyn Write) -> anyhow::Result<()> {
    let records = load_dataset(&args.dataset)?;
    let stats = compute_stats(
        &records,
        StatsOptions {
            include_abandoned: args.include_abandoned,
        },
    );
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&stats)?)?;
    } else {
        write!(out, "{stats}")?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct DiversityOutput {
    pub config: DiversityConfigEcho,
    pub datasets: Vec<DatasetDiversity>,
    pub significance: Vec<SignificanceResult>,
}

#[derive(Debug, Serialize)]
pub struct DiversityConfigEcho {
    pub resamples: usize,
    pub cutoff: usize,
    pub seed: u64,
    pub role_filter: String,
    pub bleu_mode: BleuMode,
    pub smoothing: Smoothing,
}

#[derive(Debug, Serialize)]
pub struct DatasetDiversity {
    pub name: String,
    pub path: PathBuf,
    pub dialogues: usize,
    pub metrics: Vec<MetricReport>,
}

fn split_named(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let path = PathBuf::from(spec);
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| spec.to_string());
            (name, path)
        }
    }
}

fn read_dialogues(
    path: &Path,
    format: CorpusFormat,
) -> anyhow::Result<Vec<laps_eval::diversity::Dialogue>> {
    Ok(match format {
        CorpusFormat::Laps => dialogues_from_records(&load_dataset(path)?),
        CorpusFormat::Generic => dialogues_from_generic_json(
            &std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?,
        )?,
    })
}

pub fn eval_diversity(
    args: &DiversityArgs,
    out: &mut dyn Write,
) -> anyhow::Result<DiversityOutput> {
    let config = EvalConfig {
        metrics: args.metrics.clone(),
        resamples: args.resamples,
        cutoff: args.cutoff,
        seed: args.seed,
        role_filter: args.role,
        bleu: SelfBleuConfig {
            mode: match args.bleu_mode {
                BleuModeArg::MultiReference => BleuMode::MultiReference,
                BleuModeArg::PerPair => BleuMode::PerPair,
            },
            smoothing: if args.smoothing {
                Smoothing::Method1
            } else {
                Smoothing::None
            },
            ..SelfBleuConfig::default()
        },
    };
    let mut datasets = Vec::new();
    for spec in &args.dataset {
        let (name, path) = split_named(spec);
        let dialogues = read_dialogues(&path, args.format)?;
        let metrics =
            evaluate_dataset(&dialogues, &config).with_context(|| format!("evaluating {name}"))?;
        datasets.push(DatasetDiversity {
            name,
            path,
            dialogues: dialogues.len(),
            metrics,
        });
    }
    let mut significance = Vec::new();
    for (i, a) in datasets.iter().enumerate() {
        for b in &datasets[i + 1..] {
            for (ma, mb) in a.metrics.iter().zip(&b.metrics) {
                if let Ok(r) = compare(
                    &a.name,
                    &b.name,
                    ma.metric.as_str(),
                    &ma.per_sample,
                    &mb.per_sample,
                ) {
                    significance.push(r);
                }
            }
        }
    }
    let rows: Vec<(String, Vec<MetricReport>)> = datasets
        .iter()
        .map(|d| (d.name.clone(), d.metrics.clone()))
        .collect();
    write!(out, "{}", render_table(&rows))?;
    for s in &significance {
        writeln!(
            out,
            "{} vs {} {}: t = {:.3}, p = {:.4}{}",
            s.dataset_a,
            s.dataset_b,
            s.metric,
            s.t,
            s.p_value,
            if s.significant { " (significant)" } else { "" }
        )?;
    }
    let output = DiversityOutput {
        config: DiversityConfigEcho {
            resamples: config.resamples,
            cutoff: config.cutoff,
            seed: config.seed,
            role_filter: format!("{:?}", config.role_filter).to_lowercase(),
            bleu_mode: config.bleu.mode,
            smoothing: config.bleu.smoothing,
        },
        datasets,
        significance,
    };
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_vec_pretty(&output)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(output)
}

pub fn eval_pu(
    config: &ServerConfig,
    llm: &LlmClient,
    args: &PuArgs,
    out: &mut dyn Write,
) -> anyhow::Result<()> {
    let records = load_dataset(&args.dataset)?;
    let methods = match args.method {
        MethodArg::Standard => vec![PromptMethod::Standard],
        MethodArg::Memory => vec![PromptMethod::Memory],
        MethodArg::Both => vec![PromptMethod::Standard, PromptMethod::Memory],
    };
    let eval_config = EvalMethodsConfig {
        methods,
        runs: args.runs,
        preferences: if args.extracted_prefs {
            PreferenceSource::Extracted
        } else {
            PreferenceSource::Gold
        },
        match_mode: match args.match_mode {
            MatchArg::Substring => MatchMode::Substring,
            MatchArg::TokenBoundary => MatchMode::TokenBoundary,
        },
    };
    let resolver: Box<dyn UrlResolver> = match args.resolver {
        ResolverArg::Live => Box::new(LiveResolver::new(
            args.page_bytes,
            Duration::from_secs(config.llm.timeout_secs),
        )?),
        ResolverArg::Fixture => match &args.pages {
            Some(p) => Box::new(FixtureResolver::from_json(&std::fs::read_to_string(p)?)?),
            None => Box::new(FixtureResolver::new()),
        },
    };
    let templates = Arc::new(match &config.templates_dir {
        Some(dir) => TemplateStore::with_dir(dir)?,
        None => TemplateStore::builtin(),
    });
    let extractor = Extractor::new(llm.clone(), templates, config.stages.extraction.clone());
    let report = evaluate_methods(
        &records,
        &eval_config,
        llm,
        &config.stages.recommendation,
        args.extracted_prefs.then_some(&extractor),
        Some(resolver.as_ref()),
    )?;
    write!(out, "{report}")?;
    if let Some(path) = &args.report {
        std::fs::write(path, serde_json::to_vec_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}
