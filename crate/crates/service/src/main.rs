use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vsearch::index::IndexSnapshot;
use vsearch::mining::{mine, FeatureChannels, MiningConfig};
use vsearch::model::{Category, Embedding};
use vsearch::ranking::checkpoint::write_checkpoint;
use vsearch::ranking::data::{generate, ImageSetConfig};
use vsearch::ranking::train::{evaluate_boxes, smoothed_history};
use vsearch::ranking::{train, TrainConfig};
use vsearch::rerank::{fit, quality_features, FitConfig, TreeEnsemble, QUALITY_FEATURES};
use vsearch::synthetic::{click_logs, inventory, quality_samples, ClickLogConfig, InventoryConfig};
use vsearch_service::config::Config;
use vsearch_service::deploy::{Deployment, QueryRequest};
use vsearch_service::eval::{evaluate, table, EvalOptions, EvalQuery};
use vsearch_service::ingest::{
    assemble, ingest, read_items, read_rerank_rows, read_vectors, IngestPaths, ModelScoreLine, RerankRow, VectorLine,
};
use vsearch_service::wire::{spawn, Client, ServiceHandler};

/// Desk-scale visual search: ingestion, indexing, serving and evaluation.
#[derive(Parser)]
#[command(name = "vsearch", version)]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate, deduplicate and re-export inventory files.
    Ingest(IngestArgs),
    /// Build sharded snapshots and fit category fusion into a deployment directory.
    BuildIndex(BuildArgs),
    /// Serve a deployment (query front end) and/or a single shard snapshot.
    Serve(ServeArgs),
    /// Send one query to a server or run it against a local deployment.
    Query(QueryArgs),
    /// Mine training triplets from click logs.
    MineTriplets(MineArgs),
    /// Train the toy detection-and-ranking model on synthetic triplets.
    TrainToy(TrainToyArgs),
    /// Fit the quality re-rank ensemble.
    FitRerank(FitRerankArgs),
    /// Evaluate a deployment on labelled queries.
    Eval(EvalArgs),
    /// Write a synthetic inventory, queries, click logs and re-rank data.
    GenSynthetic(GenArgs),
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    model_scores: Option<PathBuf>,
    #[arg(long)]
    click_logs: Option<PathBuf>,
    /// Directory for the cleaned export and its checksums.
    #[arg(long)]
    out: PathBuf,
    /// Hamming radius for duplicate removal; negative disables it.
    #[arg(long, allow_hyphen_values = true)]
    dedup_hamming: Option<i64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    items: PathBuf,
    #[arg(long)]
    model_scores: Option<PathBuf>,
    /// Quality ensemble JSON to deploy.
    #[arg(long)]
    ensemble: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    shards: Option<usize>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    band_width: Option<usize>,
    #[arg(long)]
    candidate_budget: Option<usize>,
    #[arg(long)]
    validation_items: Option<usize>,
    /// Seeds the held-out split used for fusion calibration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeArgs {
    /// Deployment directory to answer `query` requests from.
    #[arg(long)]
    deployment: Option<PathBuf>,
    /// Snapshot to answer `shard.coarse` requests from.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct QueryArgs {
    /// Server address; without it the query runs against `--deployment`.
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    deployment: Option<PathBuf>,
    /// JSON request file, `-` for stdin.
    #[arg(long)]
    request: Option<PathBuf>,
    /// Queries JSONL file to take the request from, with `--line`.
    #[arg(long)]
    queries: Option<PathBuf>,
    /// 1-based line of `--queries`.
    #[arg(long, default_value_t = 1)]
    line: usize,
    #[arg(long)]
    category: Option<u8>,
    #[arg(long)]
    k_final: Option<usize>,
    #[arg(long)]
    skip_rerank: bool,
    #[arg(long)]
    timings: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MineArgs {
    #[arg(long)]
    click_logs: PathBuf,
    /// Items file: the set of known ids, and the only feature channel when no
    /// `--channel` is given.
    #[arg(long)]
    items: PathBuf,
    /// Feature channel as NAME=PATH (JSONL of {"id","vec"}), in the order of
    /// the click logs' query vectors; repeatable.
    #[arg(long = "channel")]
    channels: Vec<String>,
    #[arg(long, default_value_t = 0.4)]
    gamma: f64,
    #[arg(long, default_value_t = 0.4)]
    epsilon: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the mining statistics JSON.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 200)]
    triplets: usize,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    /// Checkpoint output path.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct FitRerankArgs {
    /// Training JSONL of {"features": {...}, "label": 0|1}.
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 50)]
    rounds: usize,
    #[arg(long, default_value_t = 4)]
    max_depth: usize,
    #[arg(long, default_value_t = 0.1)]
    shrinkage: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    deployment: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Evaluate only the first N queries.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    skip_rerank: bool,
    /// Predict categories without the queries' classifier scores.
    #[arg(long)]
    ignore_model_scores: bool,
    /// Also train the toy model and report box IOU.
    #[arg(long)]
    with_toy: bool,
    /// Write the report as JSON here as well.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    items: usize,
    #[arg(long, default_value_t = 512)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    queries: usize,
    #[arg(long, default_value_t = 1000)]
    click_records: usize,
    #[arg(long, default_value_t = 5000)]
    rerank_rows: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let config = Config::load_or_default(cli.config.as_deref()).context("loading config")?;
    match cli.command {
        Command::Ingest(a) => cmd_ingest(a, config),
        Command::BuildIndex(a) => cmd_build(a, config),
        Command::Serve(a) => cmd_serve(a, config),
        Command::Query(a) => cmd_query(a, config),
        Command::MineTriplets(a) => cmd_mine(a, config),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::FitRerank(a) => cmd_fit_rerank(a, config),
        Command::Eval(a) => cmd_eval(a, config),
        Command::GenSynthetic(a) => cmd_gen(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn cmd_ingest(a: IngestArgs, mut config: Config) -> Result<()> {
    if let Some(t) = a.dedup_hamming {
        config.ingest.dedup_hamming = u32::try_from(t).ok();
    }
    let _ = a.seed; // ingestion is deterministic
    let paths = IngestPaths { items: a.items, model_scores: a.model_scores, click_logs: a.click_logs };
    let inv = ingest(&paths, &config.ingest)?;
    let (_, checksums) = inv.export(&a.out)?;
    let summary = serde_json::json!({
        "items": inv.items.len(),
        "model_scores": inv.model_scores.len(),
        "click_logs": inv.click_logs.len(),
        "rejects": inv.rejects,
        "duplicates_removed": inv.duplicates_removed.len(),
        "checksums": checksums,
    });
    std::fs::write(a.out.join("checksums.json"), serde_json::to_vec_pretty(&checksums)?)?;
    print_json(&summary)
}

fn cmd_build(a: BuildArgs, config: Config) -> Result<()> {
    let mut settings = config.build;
    settings.shards = a.shards.unwrap_or(settings.shards);
    settings.replicas = a.replicas.unwrap_or(settings.replicas);
    settings.band_width = a.band_width.unwrap_or(settings.band_width);
    settings.budget.candidate_budget = a.candidate_budget.unwrap_or(settings.budget.candidate_budget);
    settings.validation_items = a.validation_items.unwrap_or(settings.validation_items);
    settings.seed = a.seed.unwrap_or(settings.seed);

    let paths = IngestPaths { items: a.items, model_scores: a.model_scores, click_logs: None };
    let inv = ingest(&paths, &config.ingest)?;
    let ensemble = match &a.ensemble {
        Some(p) => Some(TreeEnsemble::from_json(&std::fs::read_to_string(p)?)?),
        None => None,
    };
    let (deployment, shards) = Deployment::build(&inv.items, &inv.model_scores, &settings, ensemble)?;
    deployment.save(&a.out, &shards)?;
    let checksums: Vec<String> = shards.iter().map(IndexSnapshot::checksum).collect();
    print_json(&serde_json::json!({
        "out": a.out,
        "items": inv.items.len(),
        "shards": checksums,
        "fusion": deployment.manifest().fusion,
        "calibration": deployment.manifest().calibration,
    }))
}

fn cmd_serve(a: ServeArgs, config: Config) -> Result<()> {
    let _ = a.seed; // serving is deterministic
    if a.deployment.is_none() && a.snapshot.is_none() {
        bail!("serve needs --deployment and/or --snapshot");
    }
    let handler = ServiceHandler {
        deployment: a.deployment.as_deref().map(|d| Deployment::load(d, &config.serve)).transpose()?,
        shard: a.snapshot.as_deref().map(IndexSnapshot::read_from).transpose()?,
    };
    let listen = a.listen.unwrap_or(config.serve.listen);
    let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
    let server = spawn(listener, Arc::new(handler))?;
    log::info!("listening on {}", server.addr());
    server.wait();
    Ok(())
}

fn read_request(a: &QueryArgs) -> Result<QueryRequest> {
    let mut req = if let Some(p) = &a.request {
        let mut text = String::new();
        if p.as_os_str() == "-" {
            std::io::stdin().read_to_string(&mut text)?;
        } else {
            text = std::fs::read_to_string(p)?;
        }
        serde_json::from_str(&text)?
    } else if let Some(p) = &a.queries {
        let line = open(p)?
            .lines()
            .nth(a.line.saturating_sub(1))
            .context("no such line in queries file")??;
        let q: EvalQuery = serde_json::from_str(&line)?;
        QueryRequest { embedding: q.vec, model_scores: q.model_scores, ..Default::default() }
    } else {
        bail!("query needs --request or --queries");
    };
    if let Some(c) = a.category {
        req.category = Some(Category::new(c.into())?);
    }
    req.k_final = a.k_final.or(req.k_final);
    req.skip_rerank |= a.skip_rerank;
    req.return_timings |= a.timings;
    Ok(req)
}

fn cmd_query(a: QueryArgs, config: Config) -> Result<()> {
    let _ = a.seed; // queries are deterministic
    let req = read_request(&a)?;
    let response = match (&a.addr, &a.deployment) {
        (Some(addr), _) => {
            let mut client = Client::connect(addr.as_str(), None)?;
            client.call::<_, serde_json::Value>("query", &req)?
        }
        (None, Some(dir)) => serde_json::to_value(Deployment::load(dir, &config.serve)?.query(&req)?)?,
        (None, None) => bail!("query needs --addr or --deployment"),
    };
    print_json(&response)
}

fn cmd_mine(a: MineArgs, config: Config) -> Result<()> {
    let (items, _) = read_items(&a.items.display().to_string(), open(&a.items)?, &config.ingest)?;
    let inv = assemble(items, BTreeMap::new(), Vec::new(), Vec::new(), &config.ingest)?;
    let known = inv.items.iter().map(|it| it.id).collect();
    let (records, _) = vsearch_service::ingest::read_click_logs(
        &a.click_logs.display().to_string(),
        open(&a.click_logs)?,
        &known,
        &config.ingest,
    )?;
    // the item embeddings are the feature channel unless channels are given
    let mut channels = FeatureChannels::new();
    if a.channels.is_empty() {
        channels.add_channel("items", inv.items.iter().map(|it| (it.id, it.embedding.clone())).collect());
    }
    for spec in &a.channels {
        let (name, path) = spec.split_once('=').context("--channel expects NAME=PATH")?;
        channels.add_channel(name, read_vectors(path, open(Path::new(path))?, &config.ingest)?);
    }
    let cfg = MiningConfig { gamma: a.gamma, epsilon: a.epsilon, batch_size: a.batch_size, seed: a.seed };
    let mined = mine(&records, &channels, &cfg)?;
    write_jsonl(&a.out, &mined.triplets)?;
    if let Some(p) = &a.stats {
        std::fs::write(p, serde_json::to_vec_pretty(&mined.stats)?)?;
    }
    print_json(&mined.stats)
}

fn cmd_train_toy(a: TrainToyArgs) -> Result<()> {
    let set = generate(&ImageSetConfig {
        seed: a.seed,
        triplets: a.triplets,
        height: a.image_size,
        width: a.image_size,
        ..Default::default()
    })?;
    let cfg = TrainConfig { steps: a.steps, seed: a.seed, ..Default::default() };
    let state = train(&set, &cfg)?;
    if let Some(p) = &a.out {
        let mut w = create(p)?;
        write_checkpoint(&state, &mut w)?;
        w.flush()?;
    }
    print_json(&serde_json::json!({
        "steps": state.step,
        "smoothed_loss": smoothed_history(&state.loss_history, 10),
        "boxes": evaluate_boxes(&set.images, &state.masks),
    }))
}

fn cmd_fit_rerank(a: FitRerankArgs, config: Config) -> Result<()> {
    let rows = read_rerank_rows(&a.train.display().to_string(), open(&a.train)?, &config.ingest)?;
    let cfg = FitConfig {
        rounds: a.rounds,
        max_depth: a.max_depth,
        shrinkage: a.shrinkage,
        seed: a.seed,
        ..Default::default()
    };
    let report = fit(&rows, &QUALITY_FEATURES, &cfg)?;
    std::fs::write(&a.out, report.ensemble.to_json()?)?;
    let scores: Vec<f64> = report.holdout_rows.iter().map(|&i| report.ensemble.score(&rows[i].0).map(|s| s.raw)).collect::<vsearch::Result<_>>()?;
    let labels: Vec<bool> = report.holdout_rows.iter().map(|&i| rows[i].1).collect();
    print_json(&serde_json::json!({
        "trees": report.ensemble.trees.len(),
        "train_rows": report.train_rows.len(),
        "holdout_rows": report.holdout_rows.len(),
        "holdout_auc": vsearch::rerank::auc(&scores, &labels),
    }))
}

fn cmd_eval(a: EvalArgs, config: Config) -> Result<()> {
    let deployment = Deployment::load(&a.deployment, &config.serve)?;
    let mut queries = Vec::new();
    for line in open(&a.queries)?.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            queries.push(serde_json::from_str::<EvalQuery>(&line)?);
        }
    }
    queries.truncate(a.limit.unwrap_or(usize::MAX));
    let opts = EvalOptions { skip_rerank: a.skip_rerank, ignore_model_scores: a.ignore_model_scores };
    let (mut report, _) = evaluate(&deployment, &queries, &opts)?;
    if a.with_toy {
        let set = generate(&ImageSetConfig { seed: a.seed, ..Default::default() })?;
        let state = train(&set, &TrainConfig { seed: a.seed, ..Default::default() })?;
        report.iou = Some(evaluate_boxes(&set.images, &state.masks));
    }
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_vec_pretty(&report)?)?;
    }
    print!("{}", table(&report));
    Ok(())
}

fn vector_lines<'a>(store: impl IntoIterator<Item = (&'a u64, &'a Embedding)>) -> Vec<VectorLine> {
    let mut lines: Vec<VectorLine> = store
        .into_iter()
        .map(|(&id, e)| VectorLine { id, vec: e.values().to_vec() })
        .collect();
    lines.sort_by_key(|l| l.id);
    lines
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let inv = inventory(&InventoryConfig { seed: a.seed, items: a.items, dim: a.dim, ..Default::default() })?;
    std::fs::create_dir_all(&a.out)?;
    write_jsonl(&a.out.join("items.jsonl"), inv.items.iter().map(vsearch_service::ingest::ItemLine::from))?;
    write_jsonl(
        &a.out.join("model_scores.jsonl"),
        inv.items
            .iter()
            .zip(&inv.model_scores)
            .map(|(it, s)| ModelScoreLine { id: it.id, scores: s.clone() }),
    )?;
    let queries = inv.queries(a.seed.wrapping_add(1), a.queries)?;
    write_jsonl(&a.out.join("queries.jsonl"), queries.iter().map(EvalQuery::from))?;

    let (records, channels) = click_logs(
        &inv,
        &ClickLogConfig { seed: a.seed.wrapping_add(2), records: a.click_records, ..Default::default() },
    )?;
    write_jsonl(&a.out.join("click_logs.jsonl"), records.iter().map(vsearch::mining::ClickLogLine::from))?;
    for (i, name) in channels.names().iter().enumerate() {
        write_jsonl(&a.out.join("channels").join(format!("{name}.jsonl")), vector_lines(channels.channel(i)))?;
    }
    write_jsonl(
        &a.out.join("rerank_train.jsonl"),
        quality_samples(a.seed.wrapping_add(3), a.rerank_rows, 0.5).into_iter().map(|(q, y)| RerankRow {
            features: quality_features(&q).into_iter().collect(),
            label: u8::from(y),
        }),
    )?;
    print_json(&serde_json::json!({
        "out": a.out,
        "items": inv.items.len(),
        "queries": queries.len(),
        "click_logs": records.len(),
        "rerank_rows": a.rerank_rows,
    }))
}
