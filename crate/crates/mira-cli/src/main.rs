//! Command-line entry point: index management, single-shot queries, a
//! line-oriented repl, corpus evaluation, the HTTP service, explicit
//! cache promotion, and attention-trace export.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error,
//! 3 provider failure beyond the degradation policy.

mod multipart;
mod providers;
mod server;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use mira_core::config::PipelineConfig;
use mira_core::domain::{ImageRef, Modality, Source};
use mira_core::encode::{embed_text, EmbedContent};
use mira_core::metrics::{evaluate_corpus, judge_score, parse_corpus, PairKind};
use mira_core::pipeline::{promote_cached_results, QueryInput};
use mira_core::store::{IndexRecord, RecordPayload, VectorIndex};
use providers::ProviderFactory;
use server::{state_query, ServerState};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Correctness cutoff for the detail split (the c_s > 0.5 criterion).
const DETAIL_THRESHOLD: f64 = 0.5;

#[derive(Parser)]
#[command(
    name = "mira",
    version,
    about = "Multimodal retrieval-augmented generation pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct QueryOpts {
    /// Config file (falls back to the MIRA_CONFIG environment variable).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Offline index file; omitted means an empty knowledge base.
    #[arg(long)]
    index: Option<PathBuf>,
    /// Image attached to the query.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Query text.
    #[arg(long)]
    text: Option<String>,
    #[arg(long = "k-text")]
    k_text: Option<usize>,
    #[arg(long = "k-image")]
    k_image: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Disable online retrieval (local only).
    #[arg(long = "no-online")]
    no_online: bool,
    /// Disable the offline index (search only).
    #[arg(long = "no-offline")]
    no_offline: bool,
    /// Text-modality retrieval only.
    #[arg(long = "text-only")]
    text_only: bool,
    /// Vision-modality scoring only.
    #[arg(long = "vision-only")]
    vision_only: bool,
    /// Session seed; names the query id, content is deterministic anyway.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the serialized record (or trace CSV for trace-export) here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Online cache directory.
    #[arg(long, default_value = "cache")]
    cache: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Build an offline index from a tab-separated corpus manifest.
    IndexBuild {
        /// Lines: modality<TAB>id<TAB>content-or-path[<TAB>key=value]...
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Add one record to an index (created if missing).
    IndexAdd {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        id: String,
        /// text or image
        #[arg(long)]
        modality: String,
        #[arg(long)]
        text: Option<String>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one query through the full pipeline and print the record.
    Query {
        #[command(flatten)]
        opts: QueryOpts,
    },
    /// Line-oriented interactive session ("@image.png question" attaches an image).
    Repl {
        #[command(flatten)]
        opts: QueryOpts,
    },
    /// Evaluate a candidate/reference corpus and print the metrics report.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the HTTP API until interrupted.
    Serve {
        #[command(flatten)]
        opts: QueryOpts,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
    /// Promote cached online results into the offline index.
    PromoteCache {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value = "cache")]
        cache: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one query and export its attention trace as CSV.
    TraceExport {
        #[command(flatten)]
        opts: QueryOpts,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Config(String),
    Provider(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Provider(m) => write!(f, "provider error: {m}"),
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, CliError> {
    let resolved = path
        .map(PathBuf::from)
        .or_else(|| std::env::var("MIRA_CONFIG").ok().map(PathBuf::from));
    match resolved {
        Some(p) => {
            PipelineConfig::load(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(PipelineConfig::default()),
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, opts: &QueryOpts) -> Result<(), CliError> {
    if let Some(k) = opts.k_text {
        cfg.k_text = k;
    }
    if let Some(k) = opts.k_image {
        cfg.k_image = k;
    }
    if let Some(a) = opts.alpha {
        cfg.alpha = a;
    }
    if opts.no_online {
        cfg.online_enabled = false;
    }
    if opts.no_offline {
        cfg.offline_enabled = false;
    }
    if opts.text_only {
        cfg.text_only = true;
    }
    if opts.vision_only {
        cfg.vision_only = true;
    }
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))
}

fn load_index(path: Option<&Path>, dim: usize) -> Result<VectorIndex, CliError> {
    match path {
        Some(p) => {
            VectorIndex::load(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))
        }
        None => Ok(VectorIndex::new(dim)),
    }
}

fn image_input(path: &Path) -> Result<(ImageRef, Vec<u8>), CliError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CliError::Usage(format!("cannot read image {}: {e}", path.display())))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "image".into());
    // Pixel dimensions live provider-side; record a placeholder.
    let img = ImageRef::from_bytes(id, Source::User, 1, 1, &bytes, path.display().to_string())
        .map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((img, bytes))
}

fn build_state(opts: &QueryOpts) -> Result<ServerState, CliError> {
    let mut cfg = load_config(opts.config.as_deref())?;
    apply_overrides(&mut cfg, opts)?;
    let index = load_index(opts.index.as_deref(), cfg.embed_dim)?;
    let factory = ProviderFactory::new(cfg, &opts.cache);
    Ok(ServerState::with_seed(
        index,
        factory,
        opts.seed.unwrap_or(0),
    ))
}

fn run_query(opts: &QueryOpts) -> Result<(), CliError> {
    let text = opts
        .text
        .clone()
        .ok_or_else(|| CliError::Usage("query requires --text".into()))?;
    let state = build_state(opts)?;
    let image = match &opts.image {
        Some(p) => Some(image_input(p)?),
        None => None,
    };
    let input = QueryInput { text, image };
    let (query_id, out) =
        state_query(&state, &input).map_err(|e| CliError::Provider(e.to_string()))?;
    let rtra = out
        .record_text()
        .map_err(|e| CliError::Provider(e.to_string()))?;
    eprintln!(
        "level=info event=query id={query_id} none={} rewrite={:?} reward={:?} flags={:?}",
        out.record.rearrange_none, out.rewrite.provider_used, out.reward, out.record.degraded_flags
    );
    print!("{rtra}");
    if let Some(path) = &opts.out {
        std::fs::write(path, &rtra)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    }
    Ok(())
}

fn run_trace_export(opts: &QueryOpts) -> Result<(), CliError> {
    let text = opts
        .text
        .clone()
        .ok_or_else(|| CliError::Usage("trace-export requires --text".into()))?;
    let state = build_state(opts)?;
    let image = match &opts.image {
        Some(p) => Some(image_input(p)?),
        None => None,
    };
    let input = QueryInput { text, image };
    let (query_id, out) =
        state_query(&state, &input).map_err(|e| CliError::Provider(e.to_string()))?;
    let trace = out
        .trace
        .ok_or_else(|| CliError::Provider("session produced no trace".into()))?;
    let csv = trace.to_csv();
    eprintln!(
        "level=info event=trace-export id={query_id} components={}",
        trace.weights.len()
    );
    match &opts.out {
        Some(path) => std::fs::write(path, &csv)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn run_repl(opts: &QueryOpts) -> Result<(), CliError> {
    let state = build_state(opts)?;
    let stdin = std::io::stdin();
    let mut stderr = std::io::stderr();
    let prompt = |stderr: &mut std::io::Stderr| {
        let _ = write!(stderr, "mira> ");
        let _ = stderr.flush();
    };
    prompt(&mut stderr);
    for line in stdin.lock().lines() {
        let line = line.unwrap_or_default();
        let line = line.trim();
        if line.is_empty() {
            prompt(&mut stderr);
            continue;
        }
        if line == ":q" || line == ":quit" {
            break;
        }
        let (image, text) = match line.strip_prefix('@') {
            Some(rest) => {
                let (path, rest_text) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
                match image_input(Path::new(path)) {
                    Ok(pair) => (Some(pair), rest_text.trim().to_string()),
                    Err(e) => {
                        println!("error: {e}");
                        prompt(&mut stderr);
                        continue;
                    }
                }
            }
            None => (None, line.to_string()),
        };
        if text.is_empty() {
            println!("error: empty query");
            prompt(&mut stderr);
            continue;
        }
        match state_query(&state, &QueryInput { text, image }) {
            Ok((_, out)) => {
                if out.record.rearrange_none {
                    println!(
                        "<None> (no usable evidence; flags: {:?})",
                        out.record.degraded_flags
                    );
                } else {
                    println!("Final: {}", out.record.final_answer);
                    let cited: Vec<&str> = out
                        .record
                        .citations
                        .iter()
                        .map(|c| c.evidence.as_str())
                        .collect();
                    println!("Citations: {cited:?}");
                    if !out.record.degraded_flags.is_empty() {
                        println!("Flags: {:?}", out.record.degraded_flags);
                    }
                }
            }
            Err(e) => println!("error: {e}"),
        }
        prompt(&mut stderr);
    }
    Ok(())
}

fn parse_corpus_line(
    line: &str,
    line_no: usize,
) -> Result<(Modality, String, String, Vec<(String, String)>)> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() < 3 {
        return Err(anyhow!(
            "line {line_no}: expected modality<TAB>id<TAB>content"
        ));
    }
    let modality = match fields[0] {
        "text" => Modality::Text,
        "image" => Modality::Image,
        other => return Err(anyhow!("line {line_no}: unknown modality {other:?}")),
    };
    let metadata = fields[3..]
        .iter()
        .filter_map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
        })
        .collect();
    Ok((
        modality,
        fields[1].to_string(),
        fields[2].to_string(),
        metadata,
    ))
}

fn build_record(
    factory: &ProviderFactory,
    modality: Modality,
    id: String,
    content: &str,
    metadata: Vec<(String, String)>,
) -> Result<IndexRecord> {
    let meta: std::collections::BTreeMap<String, String> = metadata.into_iter().collect();
    match modality {
        Modality::Text => {
            let embedder = factory.text_embedder();
            Ok(IndexRecord {
                id,
                modality,
                embedding: embed_text(content, embedder.as_dyn())?,
                payload: RecordPayload::Text(content.to_string()),
                metadata: meta,
            })
        }
        Modality::Image => {
            let path = Path::new(content);
            let bytes =
                std::fs::read(path).with_context(|| format!("reading image {}", path.display()))?;
            let width: u32 = meta.get("w").and_then(|v| v.parse().ok()).unwrap_or(1);
            let height: u32 = meta.get("h").and_then(|v| v.parse().ok()).unwrap_or(1);
            let img = ImageRef::from_bytes(
                id.clone(),
                Source::OfflineIndex,
                width,
                height,
                &bytes,
                path.display().to_string(),
            )?;
            let embedder = factory.image_embedder();
            let raw = embedder
                .as_dyn()
                .embed_raw(&EmbedContent::ImageBytes(&bytes))?;
            Ok(IndexRecord {
                id,
                modality,
                embedding: mira_core::domain::Embedding::normalized(Modality::Image, raw)?,
                payload: RecordPayload::Image(img),
                metadata: meta,
            })
        }
        Modality::Joint => Err(anyhow!("corpus records are text or image")),
    }
}

fn run_index_build(
    corpus: &Path,
    index_path: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let factory = ProviderFactory::new(cfg.clone(), "cache");
    let text = std::fs::read_to_string(corpus)
        .map_err(|e| CliError::Config(format!("{}: {e}", corpus.display())))?;
    let mut idx = VectorIndex::new(cfg.embed_dim);
    let mut added = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (modality, id, content, metadata) =
            parse_corpus_line(line, i + 1).map_err(|e| CliError::Config(e.to_string()))?;
        let record = build_record(&factory, modality, id, &content, metadata)
            .map_err(|e| CliError::Provider(e.to_string()))?;
        idx.add(record)
            .map_err(|e| CliError::Config(e.to_string()))?;
        added += 1;
    }
    idx.save(index_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", index_path.display())))?;
    eprintln!(
        "level=info event=index-build records={added} texts={} images={} file={}",
        idx.count_by_modality(Modality::Text),
        idx.count_by_modality(Modality::Image),
        index_path.display()
    );
    println!("indexed {added} records into {}", index_path.display());
    Ok(())
}

fn run_index_add(
    index_path: &Path,
    id: String,
    modality: &str,
    text: Option<String>,
    image: Option<PathBuf>,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let factory = ProviderFactory::new(cfg.clone(), "cache");
    let mut idx = if index_path.exists() {
        VectorIndex::load(index_path)
            .map_err(|e| CliError::Config(format!("{}: {e}", index_path.display())))?
    } else {
        VectorIndex::new(cfg.embed_dim)
    };
    let record = match modality {
        "text" => {
            let content =
                text.ok_or_else(|| CliError::Usage("--modality text requires --text".into()))?;
            build_record(&factory, Modality::Text, id, &content, vec![])
                .map_err(|e| CliError::Provider(e.to_string()))?
        }
        "image" => {
            let path =
                image.ok_or_else(|| CliError::Usage("--modality image requires --image".into()))?;
            build_record(
                &factory,
                Modality::Image,
                id,
                &path.display().to_string(),
                vec![],
            )
            .map_err(|e| CliError::Provider(e.to_string()))?
        }
        other => {
            return Err(CliError::Usage(format!(
                "modality must be text or image, got {other:?}"
            )))
        }
    };
    let rid = record.id.clone();
    idx.add(record)
        .map_err(|e| CliError::Config(e.to_string()))?;
    idx.save(index_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", index_path.display())))?;
    println!("added {rid}; index now holds {} records", idx.len());
    Ok(())
}

fn run_eval(corpus: &Path, config: Option<&Path>) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let factory = ProviderFactory::new(cfg, "cache");
    let text = std::fs::read_to_string(corpus)
        .map_err(|e| CliError::Config(format!("{}: {e}", corpus.display())))?;
    let mut pairs = parse_corpus(&text).map_err(|e| CliError::Config(e.to_string()))?;
    // Detail pairs without a judge score get one from the judge provider,
    // when configured.
    let judge = factory
        .judge()
        .map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(judge) = &judge {
        for pair in pairs.iter_mut() {
            if pair.kind == PairKind::VqaDetail && pair.judge_score.is_none() {
                let reference = pair.references.first().cloned().unwrap_or_default();
                let score = judge_score(&pair.candidate, &reference, judge.as_dyn())
                    .map_err(|e| CliError::Provider(e.to_string()))?;
                pair.judge_score = Some(score);
            }
        }
    }
    let report =
        evaluate_corpus(&pairs, DETAIL_THRESHOLD).map_err(|e| CliError::Config(e.to_string()))?;
    print!("{}", report.render());
    Ok(())
}

fn run_promote_cache(
    index_path: &Path,
    cache: &Path,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let cfg = load_config(config)?;
    let factory = ProviderFactory::new(cfg, cache);
    let mut idx = VectorIndex::load(index_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", index_path.display())))?;
    let embedder = factory.text_embedder();
    let promoted = promote_cached_results(&mut idx, cache, embedder.as_dyn())
        .map_err(|e| CliError::Provider(e.to_string()))?;
    for id in &promoted {
        println!("promoted {id}");
    }
    idx.save(index_path)
        .map_err(|e| CliError::Config(format!("{}: {e}", index_path.display())))?;
    println!(
        "promoted {} cached results; index now holds {} records",
        promoted.len(),
        idx.len()
    );
    Ok(())
}

fn run_serve(opts: &QueryOpts, port: u16) -> Result<(), CliError> {
    let state = build_state(opts)?;
    let addr = format!("0.0.0.0:{port}");
    let handle = server::serve(&addr, state, 4).map_err(|e| CliError::Config(e.to_string()))?;
    eprintln!("level=info event=serve addr={}", handle.addr);
    handle.join();
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::IndexBuild {
            corpus,
            index,
            config,
        } => run_index_build(&corpus, &index, config.as_deref()),
        Command::IndexAdd {
            index,
            id,
            modality,
            text,
            image,
            config,
        } => run_index_add(&index, id, &modality, text, image, config.as_deref()),
        Command::Query { opts } => run_query(&opts),
        Command::Repl { opts } => run_repl(&opts),
        Command::Eval { corpus, config } => run_eval(&corpus, config.as_deref()),
        Command::Serve { opts, port } => run_serve(&opts, port),
        Command::PromoteCache {
            index,
            cache,
            config,
        } => run_promote_cache(&index, &cache, config.as_deref()),
        Command::TraceExport { opts } => run_trace_export(&opts),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are successful exits; anything else is usage.
            if e.kind() == clap::error::ErrorKind::DisplayHelp
                || e.kind() == clap::error::ErrorKind::DisplayVersion
            {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => ExitCode::from(1),
                CliError::Config(_) => ExitCode::from(2),
                CliError::Provider(_) => ExitCode::from(3),
            }
        }
    }
}
