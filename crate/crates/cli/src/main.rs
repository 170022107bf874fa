use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};

use tmd_cli::bench::run_bench;
use tmd_cli::config::{offline_config, AppConfig};
use tmd_cli::server::{self, AppState, GenerateResponse};
use tmd_core::forge::{build_dataset, export_dataset, ForgeConfig, ForgeStats, SourceImage};
use tmd_core::metering::{estimate_cost, latency_report, read_meter_file, token_report, RateCard};
use tmd_core::model::{Scenario, ScenarioKind, ScenarioRequest};
use tmd_core::sus::{aggregate_sus, load_sus_csv, GroupBy};
use tmd_core::texture::{decode_mask_png, decode_png};

#[derive(Parser)]
#[command(name = "tmd", version, about = "Defect texture generation for railway components")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct EngineArgs {
    /// Service config file. Without one, offline backends write under --data-dir.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "tmd-data")]
    data_dir: PathBuf,
}

impl EngineArgs {
    fn load(&self) -> Result<AppConfig> {
        match &self.config {
            Some(path) => AppConfig::load(path).with_context(|| format!("loading {}", path.display())),
            None => offline_config(&self.data_dir),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP service.
    Serve {
        #[command(flatten)]
        engine: EngineArgs,
        /// Overrides the listen address from the config.
        #[arg(long)]
        listen: Option<std::net::SocketAddr>,
    },
    /// Generate one texture and print the response as JSON.
    Generate(GenerateArgs),
    /// Build instruction datasets.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Measure latency, tokens and cost per scenario.
    Bench(BenchArgs),
    /// Score usability questionnaires.
    Sus {
        #[command(subcommand)]
        command: SusCommand,
    },
    /// Summarize a meter file.
    Report {
        #[arg(long)]
        meters: PathBuf,
        /// Rate card for the cost summary.
        #[arg(long)]
        rates: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Table,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Offline,
    Remote,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_scenario)]
    scenario: ScenarioKind,
    /// Prompt text (prompt scenario).
    #[arg(long)]
    text: Option<String>,
    #[arg(long)]
    material: Option<String>,
    #[arg(long)]
    defect: Option<String>,
    /// PNG photo to edit (inpaint scenario).
    #[arg(long)]
    image: Option<PathBuf>,
    /// Binary PNG mask, same size as the image.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    instruction: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    request_id: Option<String>,
    /// Also copy the artifact here.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
}

#[derive(Subcommand)]
enum DatasetCommand {
    Build {
        /// Directory of PNG/JPEG defect images.
        #[arg(long)]
        images: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        max_attempts_factor: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Offline)]
        backend: Mode,
        /// Config with the remote caption and rephrase endpoints.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 50)]
    runs: usize,
    /// `all` or a comma-separated list of library, prompt, inpaint.
    #[arg(long, default_value = "all")]
    scenarios: String,
    #[arg(long, value_enum, default_value_t = Mode::Offline)]
    mode: Mode,
    /// Required for remote mode.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Receives meters.jsonl, artifacts/ and bench_report.json.
    #[arg(long, default_value = "tmd-bench")]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
}

#[derive(Subcommand)]
enum SusCommand {
    Score {
        #[arg(long)]
        input: PathBuf,
        /// scenario, platform or scenario,platform
        #[arg(long, default_value = "scenario")]
        by: GroupBy,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse()
}

fn parse_scenarios(s: &str) -> Result<Vec<ScenarioKind>> {
    if s == "all" {
        return Ok(ScenarioKind::ALL.to_vec());
    }
    s.split(',')
        .map(|p| p.trim().parse::<ScenarioKind>().map_err(anyhow::Error::msg))
        .collect()
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    match Cli::parse().command {
        Command::Serve { engine, listen } => serve(engine, listen),
        Command::Generate(args) => generate(args),
        Command::Dataset {
            command:
                DatasetCommand::Build {
                    images,
                    k,
                    seed,
                    max_attempts_factor,
                    out,
                    backend,
                    config,
                },
        } => dataset_build(&images, k, seed, max_attempts_factor, &out, backend, config.as_deref()),
        Command::Bench(args) => bench(args),
        Command::Sus {
            command: SusCommand::Score { input, by, format },
        } => sus_score(&input, by, format),
        Command::Report { meters, rates, format } => report(&meters, rates.as_deref(), format),
    }
}

fn serve(args: EngineArgs, listen: Option<std::net::SocketAddr>) -> Result<()> {
    let cfg = args.load()?;
    let addr = listen.unwrap_or(cfg.listen);
    let engine = Arc::new(cfg.engine()?);
    let state = AppState::new(engine, cfg.max_concurrency);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| {
            if e.kind() == std::io::ErrorKind::AddrInUse {
                anyhow::anyhow!("address {addr} is already in use")
            } else {
                anyhow::Error::new(e).context(format!("binding {addr}"))
            }
        })?;
        tracing::info!(%addr, "listening");
        server::serve(listener, state, server::shutdown_signal()).await?;
        Ok(())
    })
}

fn read_png(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn generate(args: GenerateArgs) -> Result<()> {
    let cfg = args.engine.load()?;
    let engine = cfg.engine()?;
    let scenario = match args.scenario {
        ScenarioKind::Library => Scenario::LibrarySelect {
            material_id: args.material.context("--material is required for the library scenario")?,
            defect_id: args.defect.context("--defect is required for the library scenario")?,
        },
        ScenarioKind::Prompt => Scenario::CreativePrompt {
            text: args.text.context("--text is required for the prompt scenario")?,
        },
        ScenarioKind::Inpaint => Scenario::ImageInpaint {
            image: args
                .image
                .as_deref()
                .map(|p| Ok::<_, anyhow::Error>(decode_png(&read_png(p)?)?.image))
                .transpose()?,
            mask: args
                .mask
                .as_deref()
                .map(|p| Ok::<_, anyhow::Error>(decode_mask_png(&read_png(p)?)?))
                .transpose()?,
            instruction: args.instruction.unwrap_or_default(),
        },
    };
    let request = ScenarioRequest {
        request_id: args.request_id.unwrap_or_default(),
        seed: args.seed,
        scenario,
    };
    let out = engine.handle(request, Instant::now()).map_err(anyhow::Error::new)?;
    if let Some(dest) = &args.out {
        std::fs::write(dest, &out.png).with_context(|| format!("writing {}", dest.display()))?;
    }
    let response = GenerateResponse::from_outcome(out, false);
    println!("{}", serde_json::to_string_pretty(&response)?);
    Ok(())
}

fn created_at() -> Result<DateTime<Utc>> {
    match std::env::var("SOURCE_DATE_EPOCH") {
        Ok(v) => {
            let secs: i64 = v.trim().parse().context("SOURCE_DATE_EPOCH must be an integer")?;
            DateTime::from_timestamp(secs, 0).context("SOURCE_DATE_EPOCH out of range")
        }
        Err(_) => Ok(Utc::now()),
    }
}

fn dataset_build(
    images: &Path,
    k: usize,
    seed: u64,
    max_attempts_factor: usize,
    out: &Path,
    backend: Mode,
    config: Option<&Path>,
) -> Result<()> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(images)
        .with_context(|| format!("reading {}", images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG or JPEG images in {}", images.display());
    }
    let sources = paths
        .iter()
        .map(|p| {
            Ok(SourceImage {
                path: p.file_name().unwrap_or_default().to_string_lossy().into_owned(),
                bytes: std::fs::read(p).with_context(|| format!("reading {}", p.display()))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut forge = ForgeConfig::new(k, seed);
    forge.max_attempts_factor = max_attempts_factor;
    let (captioner, rephraser) = match backend {
        Mode::Offline => {
            let cfg = AppConfig::offline(Path::new("."));
            (cfg.captioner()?, cfg.rephraser()?)
        }
        Mode::Remote => {
            let cfg = AppConfig::load(config.context("--backend remote needs --config")?)?;
            (cfg.captioner()?, cfg.rephraser()?)
        }
    };
    let stats = ForgeStats::default();
    let dataset = build_dataset(&sources, &forge, captioner.as_ref(), rephraser.as_ref(), created_at()?, Some(&stats))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    export_dataset(&dataset, out)?;
    eprintln!(
        "wrote {} entries for {} images to {} ({} caption calls, {} rephrase calls)",
        dataset.entries.len(),
        sources.len(),
        out.display(),
        stats.caption_calls.into_inner(),
        stats.rephrase_calls.into_inner(),
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    let scenarios = parse_scenarios(&args.scenarios)?;
    let mut cfg = match args.mode {
        Mode::Offline => offline_config(&args.out)?,
        Mode::Remote => AppConfig::load(args.config.as_deref().context("remote mode needs --config")?)?,
    };
    cfg.meter_file = args.out.join("meters.jsonl");
    cfg.artifact_dir = args.out.join("artifacts");
    std::fs::create_dir_all(&args.out)?;
    if cfg.meter_file.exists() {
        std::fs::remove_file(&cfg.meter_file)?;
    }
    let engine = cfg.engine()?;
    let mode = match args.mode {
        Mode::Offline => "offline",
        Mode::Remote => "remote",
    };
    let report = run_bench(&engine, &scenarios, args.runs, mode);
    let report_path = args.out.join("bench_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    match args.format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    eprintln!("meters: {}  report: {}", cfg.meter_file.display(), report_path.display());
    if report.scenarios.iter().any(|s| s.incomplete) {
        bail!("bench incomplete: a scenario hit {} consecutive failures", tmd_cli::bench::MAX_CONSECUTIVE_FAILURES);
    }
    Ok(())
}

fn sus_score(input: &Path, by: GroupBy, format: Format) -> Result<()> {
    let responses = load_sus_csv(input)?;
    let report = aggregate_sus(&responses, by)?;
    match format {
        Format::Table => print!("{}", report.to_table()),
        Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    Ok(())
}

fn report(meters: &Path, rates: Option<&Path>, format: Format) -> Result<()> {
    let records = read_meter_file(meters)?;
    let latency = latency_report(&records);
    let tokens = token_report(&records);
    let costs = match rates {
        Some(path) => {
            let card = RateCard::load(path)?;
            let mut by = std::collections::BTreeMap::new();
            for kind in latency.keys() {
                let group: Vec<_> = records.iter().filter(|r| r.scenario == *kind).cloned().collect();
                by.insert(*kind, estimate_cost(&group, &card)?);
            }
            Some((by, estimate_cost(&records, &card)?))
        }
        None => None,
    };
    match format {
        Format::Json => {
            let mut v = serde_json::json!({"records": records.len(), "latency": latency, "tokens": tokens});
            if let Some((by, total)) = &costs {
                v["cost"] = serde_json::json!({"by_scenario": by, "total": total});
            }
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Format::Table => {
            println!(
                "{:<9}{:>5}{:>10}{:>8}{:>8}{:>8}{:>8}{:>10}{:>12}",
                "scenario", "n", "mean_ms", "p50", "p95", "min", "max", "tokens", "cost"
            );
            for (kind, l) in &latency {
                let t = tokens.get(kind).map_or(0.0, |t| t.mean_total);
                let c = costs
                    .as_ref()
                    .and_then(|(by, _)| by.get(kind))
                    .map_or("-".to_owned(), |c| c.total.to_string());
                println!(
                    "{:<9}{:>5}{:>10.1}{:>8}{:>8}{:>8}{:>8}{:>10.1}{:>12}",
                    kind.as_str(),
                    l.n,
                    l.mean_ms,
                    l.p50_ms,
                    l.p95_ms,
                    l.min_ms,
                    l.max_ms,
                    t,
                    c
                );
            }
            if let Some((_, total)) = &costs {
                println!(
                    "total cost {} (tokens {}, time {}) over {} records",
                    total.total, total.token_cost, total.time_cost, total.records
                );
            }
        }
    }
    Ok(())
}
