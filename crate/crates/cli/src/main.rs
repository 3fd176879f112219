//! `zerodex` command-line front end: single-stage debugging commands,
//! the end-to-end answer path, HTTP serving, evaluation, and training-file
//! preparation.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use serde::Serialize;

use zerodex_core::config::{build_chat_backend, RunConfig};
use zerodex_core::eval::{
    convert_record, generate_synthetic, run_suite, BenchmarkCase, ConvertFormat, NeedleSpec,
    SystemKind, VectorParams,
};
use zerodex_core::extractor::extract_document;
use zerodex_core::gateway::HashEmbedder;
use zerodex_core::parser::{decide_and_extract, serialize_outcome};
use zerodex_core::pipeline::{Backends, PipelineConfig};
use zerodex_core::reranker::{rerank, PoolEntry};
use zerodex_core::search::{
    search, BingStyleEngine, GoogleStyleEngine, MockEngine, SearchEngineClient,
};
use zerodex_core::segmenter::render_tagged;
use zerodex_core::training::{
    annotate, derive_instruction_b, dpo_build, enforce_none_ratio, filter_short, sample_raw,
    Annotated, PrepManifest, RequestLogEntry, DEFAULT_MIN_TOKENS, DEFAULT_NONE_TARGET,
    DEFAULT_NONE_TOLERANCE,
};
use zerodex_core::{
    ApproxTokenizer, InferenceRequest, KeywordList, KeywordRole, ParseOutcome, SourceList,
    TaggedDocument, TimeAnnotation,
};

#[derive(Parser)]
#[command(name = "zerodex", about = "Zero-indexing search-augmented generation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the parser stage on one request and print the ParseOutcome.
    Parse {
        /// Request text file, or `-` for stdin.
        #[arg(long)]
        request: String,
        /// Current time as ISO 8601 (defaults to the config clock).
        #[arg(long)]
        now: Option<String>,
        #[arg(long)]
        config: PathBuf,
    },
    /// Query a search engine with one keyword list; hits print as JSONL.
    Search {
        /// Comma-separated keywords.
        #[arg(long)]
        keywords: String,
        #[arg(long, default_value = "en")]
        language: String,
        /// `mock:<fixture.jsonl>`, `google`, or `bing`.
        #[arg(long)]
        engine: String,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        api_key_env: Option<String>,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
    /// Segment stdin into tagged units.
    Segment {
        /// Print one {tag_id, text} JSON object per line instead of the
        /// tagged serialization.
        #[arg(long)]
        jsonl: bool,
    },
    /// Score and select documents for one keyword list.
    Rerank {
        #[arg(long)]
        keywords: String,
        #[arg(long, default_value = "en")]
        language: String,
        /// JSONL of {url, snippet, body_text[, source_list, engine_rank]}.
        #[arg(long)]
        docs: PathBuf,
        #[arg(long, default_value_t = 6)]
        k: usize,
        #[arg(long, default_value_t = 256)]
        dim: usize,
    },
    /// Run the extractor stage over tagged documents.
    Extract {
        /// Request text file, or `-` for stdin.
        #[arg(long)]
        request: String,
        /// JSONL of TaggedDocument records.
        #[arg(long)]
        doc: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the full pipeline for one request and print the Answer JSON.
    Answer {
        /// Request text file, or `-` for stdin.
        #[arg(long)]
        request: String,
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the pipeline over HTTP.
    Serve {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        port: u16,
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluation harness.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Training-file preparation.
    #[command(subcommand)]
    Prep(PrepCommand),
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Generate needle-in-a-haystack cases.
    Synth {
        /// Comma-separated context lengths in characters.
        #[arg(long)]
        lengths: String,
        /// Comma-separated depth fractions in [0, 1].
        #[arg(long)]
        depths: String,
        /// JSONL of NeedleSpec records.
        #[arg(long)]
        needles: PathBuf,
        /// Filler corpus, one sentence per line (a deterministic built-in
        /// corpus is used when omitted).
        #[arg(long)]
        haystack: Option<PathBuf>,
        /// Output cases file (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a suite of cases against one system.
    Run {
        #[arg(long)]
        system: SystemKind,
        #[arg(long)]
        cases: PathBuf,
        /// Output directory for results.jsonl and summary.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
    },
    /// Convert a public dataset's native JSON into benchmark cases.
    Convert {
        #[arg(long)]
        format: String,
        /// Input file or directory of files.
        #[arg(long, name = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PrepCommand {
    /// Build the instruction set (A and B forms) with robustness filters.
    Instructions {
        /// JSONL of {request_text, pages: [TaggedDocument]}.
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 2)]
        per_request: usize,
        #[arg(long, default_value_t = DEFAULT_MIN_TOKENS)]
        min_tokens: usize,
        #[arg(long, default_value_t = DEFAULT_NONE_TARGET)]
        none_target: f64,
        #[arg(long, default_value_t = DEFAULT_NONE_TOLERANCE)]
        tolerance: f64,
    },
    /// Build preference records by perturbing one document per round.
    Dpo {
        /// JSONL of {request_text, pages: [TaggedDocument]}.
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        rounds: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Parse { request, now, config } => cmd_parse(&request, now.as_deref(), &config),
        Command::Search { keywords, language, engine, endpoint, api_key_env, n } => {
            cmd_search(&keywords, &language, &engine, endpoint, api_key_env, n)
        }
        Command::Segment { jsonl } => cmd_segment(jsonl),
        Command::Rerank { keywords, language, docs, k, dim } => {
            cmd_rerank(&keywords, &language, &docs, k, dim)
        }
        Command::Extract { request, doc, config } => cmd_extract(&request, &doc, &config),
        Command::Answer { request, config } => cmd_answer(&request, &config),
        Command::Serve { host, port, config } => cmd_serve(&host, port, &config),
        Command::Eval(cmd) => match cmd {
            EvalCommand::Synth { lengths, depths, needles, haystack, out } => {
                cmd_eval_synth(&lengths, &depths, &needles, haystack.as_deref(), out.as_deref())
            }
            EvalCommand::Run { system, cases, out, config } => {
                cmd_eval_run(system, &cases, &out, &config)
            }
            EvalCommand::Convert { format, input, out } => cmd_eval_convert(&format, &input, &out),
        },
        Command::Prep(cmd) => match cmd {
            PrepCommand::Instructions {
                raw, out, seed, config, per_request, min_tokens, none_target, tolerance,
            } => cmd_prep_instructions(
                &raw, &out, seed, &config, per_request, min_tokens, none_target, tolerance,
            ),
            PrepCommand::Dpo { cases, out, rounds, seed, config } => {
                cmd_prep_dpo(&cases, &out, rounds, seed, &config)
            }
        },
    }
}

fn read_request_text(arg: &str) -> Result<String> {
    let text = if arg == "-" {
        let mut buf = String::new();
        std::io::stdin().read_to_string(&mut buf)?;
        buf
    } else {
        std::fs::read_to_string(arg).with_context(|| format!("reading request file {arg}"))?
    };
    Ok(text.trim().to_string())
}

fn load_config(path: &Path) -> Result<(RunConfig, PipelineConfig, Backends)> {
    let run = RunConfig::from_path(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let (pipeline, backends) = run.build(base)?;
    Ok((run, pipeline, backends))
}

fn keyword_list(keywords: &str, language: &str) -> KeywordList {
    KeywordList {
        language: language.to_string(),
        keywords: keywords
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect(),
        role: KeywordRole::Main,
    }
}

fn cmd_parse(request: &str, now: Option<&str>, config: &Path) -> Result<()> {
    let (_, pipeline, backends) = load_config(config)?;
    let now: DateTime<Utc> = match now {
        Some(ts) => ts.parse().with_context(|| format!("bad --now value {ts:?}"))?,
        None => pipeline.clock.now(),
    };
    let req = InferenceRequest::new("cli", read_request_text(request)?, now)?;
    let (outcome, _) = decide_and_extract(backends.parser.as_ref(), &req, now)?;
    println!("{}", serialize_outcome(&outcome));
    Ok(())
}

fn build_engine(
    engine: &str,
    endpoint: Option<String>,
    api_key_env: Option<String>,
) -> Result<Arc<dyn SearchEngineClient>> {
    Ok(match engine {
        s if s.starts_with("mock:") => Arc::new(MockEngine::from_path(Path::new(&s[5..]))?),
        "google" => Arc::new(GoogleStyleEngine::new(
            endpoint.context("--endpoint required for google")?,
            api_key_env.context("--api-key-env required for google")?,
        )),
        "bing" => Arc::new(BingStyleEngine::new(
            endpoint.context("--endpoint required for bing")?,
            api_key_env.context("--api-key-env required for bing")?,
        )),
        other => bail!("unknown engine {other:?}; use mock:<path>, google, or bing"),
    })
}

fn cmd_search(
    keywords: &str,
    language: &str,
    engine: &str,
    endpoint: Option<String>,
    api_key_env: Option<String>,
    n: usize,
) -> Result<()> {
    let engine = build_engine(engine, endpoint, api_key_env)?;
    let hits = search(engine.as_ref(), &keyword_list(keywords, language), n)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for hit in hits {
        writeln!(out, "{}", serde_json::to_string(&hit)?)?;
    }
    Ok(())
}

fn cmd_segment(jsonl: bool) -> Result<()> {
    let mut input = String::new();
    std::io::stdin().read_to_string(&mut input)?;
    let doc = TaggedDocument::from_body("stdin", "", &input);
    if jsonl {
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        for seg in &doc.segments {
            writeln!(out, "{}", serde_json::to_string(seg)?)?;
        }
    } else {
        println!("{}", render_tagged(&doc));
    }
    Ok(())
}

#[derive(serde::Deserialize)]
struct RerankDocLine {
    url: String,
    #[serde(default)]
    snippet: String,
    body_text: String,
    #[serde(default)]
    source_list: Option<SourceList>,
    #[serde(default)]
    engine_rank: Option<u32>,
}

#[derive(Serialize)]
struct RerankReport<'a> {
    selection: &'a zerodex_core::RankedSelection,
    candidates: &'a [zerodex_core::RankCandidate],
    notes: &'a [String],
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let data =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .with_context(|| format!("{} line {}", path.display(), i + 1))?,
        );
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = String::new();
    for r in records {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_rerank(keywords: &str, language: &str, docs: &Path, k: usize, dim: usize) -> Result<()> {
    let lines: Vec<RerankDocLine> = read_jsonl(docs)?;
    let pool: Vec<PoolEntry> = lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| PoolEntry {
            doc: TaggedDocument::from_body(l.url, l.snippet, &l.body_text),
            source_list: l.source_list.unwrap_or(SourceList::Main),
            engine_rank: l.engine_rank.unwrap_or(i as u32 + 1),
        })
        .collect();
    let outcome = ParseOutcome {
        needs_search: true,
        keyword_lists: vec![keyword_list(keywords, language)],
        time_annotation: TimeAnnotation::None,
    };
    let embedder = HashEmbedder::new(dim);
    let (selection, candidates, notes) = rerank(&embedder, &outcome, &pool, k)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&RerankReport {
            selection: &selection,
            candidates: &candidates,
            notes: &notes,
        })?
    );
    Ok(())
}

fn cmd_extract(request: &str, doc: &Path, config: &Path) -> Result<()> {
    let (_, pipeline, backends) = load_config(config)?;
    let req = InferenceRequest::new("cli", read_request_text(request)?, pipeline.clock.now())?;
    let docs: Vec<TaggedDocument> = read_jsonl(doc)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, d) in docs.iter().enumerate() {
        let (result, _) = extract_document(
            backends.extractor.as_ref(),
            &req,
            d,
            i,
            pipeline.extractor_window_cap_chars,
        );
        writeln!(out, "{}", serde_json::to_string(&result)?)?;
    }
    Ok(())
}

fn cmd_answer(request: &str, config: &Path) -> Result<()> {
    let (_, pipeline, backends) = load_config(config)?;
    let req = InferenceRequest::new("cli", read_request_text(request)?, pipeline.clock.now())?;
    let answer = zerodex_core::pipeline::answer(&req, &pipeline, &backends)?;
    println!("{}", serde_json::to_string(&answer)?);
    Ok(())
}

fn cmd_serve(host: &str, port: u16, config: &Path) -> Result<()> {
    let (_, pipeline, backends) = load_config(config)?;
    let addr: std::net::SocketAddr = format!("{host}:{port}")
        .parse()
        .with_context(|| format!("bad address {host}:{port}"))?;
    eprintln!("listening on http://{addr}");
    zerodex_core::pipeline::serve(addr, pipeline, backends)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(arg: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    arg.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| anyhow::anyhow!("bad {what} {s:?}: {e}")))
        .collect()
}

/// Deterministic filler corpus used when no haystack file is supplied.
fn builtin_haystack() -> Vec<String> {
    (0..20_000)
        .map(|i| {
            format!(
                "Filler sentence number {i} discusses topic {} at considerable length.",
                i % 97
            )
        })
        .collect()
}

fn cmd_eval_synth(
    lengths: &str,
    depths: &str,
    needles: &Path,
    haystack: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let lengths: Vec<usize> = parse_list(lengths, "length")?;
    let depths: Vec<f64> = parse_list(depths, "depth")?;
    let specs: Vec<NeedleSpec> = read_jsonl(needles)?;
    let filler = match haystack {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect(),
        None => builtin_haystack(),
    };
    let cases = generate_synthetic(&filler, &specs, &lengths, &depths)?;
    match out {
        Some(path) => {
            write_jsonl(path, &cases)?;
            eprintln!("wrote {} cases to {}", cases.len(), path.display());
        }
        None => {
            let stdout = std::io::stdout();
            let mut w = stdout.lock();
            for c in &cases {
                writeln!(w, "{}", serde_json::to_string(c)?)?;
            }
        }
    }
    Ok(())
}

fn cmd_eval_run(system: SystemKind, cases: &Path, out: &Path, config: &Path) -> Result<()> {
    let (_, _, backends) = load_config(config)?;
    let cases: Vec<BenchmarkCase> = read_jsonl(cases)?;
    let result = run_suite(
        system,
        &cases,
        backends.extractor.as_ref(),
        backends.generator.as_ref(),
        backends.judge.as_deref(),
        backends.embedder.as_ref(),
        &VectorParams::default(),
    );
    std::fs::create_dir_all(out)?;
    write_jsonl(&out.join("results.jsonl"), &result.cases)?;
    std::fs::write(
        out.join("summary.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "system": result.system,
            "counts": result.counts,
            "metrics": result.metrics,
            "failures": result.failures,
        }))?,
    )?;
    println!(
        "system={:?} cases={} WIN={} TIE={} LOSE={} PBIA={} failures={}",
        result.system,
        result.cases.len(),
        result.counts.win,
        result.counts.tie,
        result.counts.lose,
        result.counts.pbia,
        result.failures,
    );
    if let Some(m) = result.metrics {
        println!(
            "precision={:.4} recall={:.4} f1={:.4} em={:.4}",
            m.precision, m.recall, m.f1, m.em_ratio
        );
    }
    Ok(())
}

fn cmd_eval_convert(format: &str, input: &Path, out: &Path) -> Result<()> {
    let format: ConvertFormat = format.parse().map_err(|e: String| anyhow::anyhow!(e))?;
    let mut files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    let mut cases = Vec::new();
    let mut skipped = 0usize;
    for file in files.drain(..) {
        let data = std::fs::read_to_string(&file)
            .with_context(|| format!("reading {}", file.display()))?;
        for (i, line) in data.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match convert_record(format, line) {
                Ok(case) => cases.push(case),
                Err(e) => {
                    skipped += 1;
                    eprintln!("{} line {}: skipped: {e}", file.display(), i + 1);
                }
            }
        }
    }
    write_jsonl(out, &cases)?;
    eprintln!("wrote {} cases ({skipped} skipped) to {}", cases.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_prep_instructions(
    raw: &Path,
    out: &Path,
    seed: u64,
    config: &Path,
    per_request: usize,
    min_tokens: usize,
    none_target: f64,
    tolerance: f64,
) -> Result<()> {
    let (_, _, backends) = load_config(config)?;
    let log: Vec<RequestLogEntry> = read_jsonl(raw)?;
    let sampled = sample_raw(&log, per_request, seed, &ApproxTokenizer);
    let sampled_count = sampled.len();
    let (kept_pairs, filtered_short) = filter_short(sampled, min_tokens);

    let mut instruction_a = Vec::new();
    let mut rejected = Vec::new();
    for (i, pair) in kept_pairs.iter().enumerate() {
        let seeds = (
            seed.wrapping_add(2 * i as u64 + 1),
            seed.wrapping_add(2 * i as u64 + 2),
        );
        match annotate(backends.extractor.as_ref(), pair, seeds) {
            Annotated::Kept(a) => instruction_a.push(a),
            r @ Annotated::Rejected { .. } => rejected.push(r),
        }
    }
    let rejected_count = rejected.len();
    let (instruction_a, final_ratio) =
        enforce_none_ratio(instruction_a, none_target, tolerance, seed)?;
    let instruction_b: Vec<_> = instruction_a.iter().map(derive_instruction_b).collect();

    std::fs::create_dir_all(out)?;
    write_jsonl(&out.join("instruction_a.jsonl"), &instruction_a)?;
    write_jsonl(&out.join("instruction_b.jsonl"), &instruction_b)?;
    write_jsonl(&out.join("rejected.jsonl"), &rejected)?;
    let manifest = PrepManifest {
        seed,
        sampled: sampled_count,
        filtered_short,
        rejected_contradictory: rejected_count,
        kept: instruction_a.len(),
        final_none_ratio: final_ratio,
    };
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    println!(
        "sampled={} filtered_short={} rejected={} kept={} none_ratio={:.4}",
        manifest.sampled,
        manifest.filtered_short,
        manifest.rejected_contradictory,
        manifest.kept,
        manifest.final_none_ratio,
    );
    Ok(())
}

fn cmd_prep_dpo(cases: &Path, out: &Path, rounds: usize, seed: u64, config: &Path) -> Result<()> {
    let run = RunConfig::from_path(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let (_, backends) = run.build(base)?;
    let alt_spec = run
        .backends
        .alt_extractor
        .as_ref()
        .context("prep dpo needs [backends.alt_extractor] in the config")?;
    let alt = build_chat_backend(alt_spec, base)?;
    let judge = backends
        .judge
        .as_ref()
        .context("prep dpo needs [backends.judge] in the config")?;

    let entries: Vec<RequestLogEntry> = read_jsonl(cases)?;
    let mut records = Vec::new();
    let mut traces = Vec::new();
    let mut failures = 0usize;
    for (i, entry) in entries.iter().enumerate() {
        match dpo_build(
            &entry.request_text,
            &entry.pages,
            backends.extractor.as_ref(),
            alt.as_ref(),
            backends.generator.as_ref(),
            judge.as_ref(),
            rounds,
            seed.wrapping_add(i as u64),
        ) {
            Ok((mut r, mut t)) => {
                records.append(&mut r);
                traces.append(&mut t);
            }
            Err(e) => {
                failures += 1;
                eprintln!("request {i}: {e}");
            }
        }
    }
    let discards = traces.iter().filter(|t| t.discarded.is_some()).count();
    std::fs::create_dir_all(out)?;
    write_jsonl(&out.join("preferences.jsonl"), &records)?;
    write_jsonl(&out.join("traces.jsonl"), &traces)?;
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "seed": seed,
            "rounds": rounds,
            "requests": entries.len(),
            "records": records.len(),
            "discards": discards,
            "failures": failures,
        }))?,
    )?;
    println!(
        "requests={} records={} discards={} failures={}",
        entries.len(),
        records.len(),
        discards,
        failures,
    );
    Ok(())
}
