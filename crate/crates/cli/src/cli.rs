use crate::service::{self, load_graph, ServiceState, Snapshot, DEFAULT_WORKERS};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fraudgraph_core::datagen::{generate, read_log, write_log, GenConfig};
use fraudgraph_core::experiment::{run_experiment, Dataset, ExperimentConfig, ModelKind, DEFAULT_MIN_ENTITY_DEGREE};
use fraudgraph_core::explainer::{export_explanation, extract_subgraph, optimize_masks, ExplainerConfig, DEFAULT_THRESHOLD};
use fraudgraph_core::hetgraph::{build_graph, HeteroGraph};
use fraudgraph_core::metrics::render_table;
use fraudgraph_core::predictor::{load_checkpoint, save_checkpoint, train, PredictorConfig, TrainConfig};
use fraudgraph_core::sampler::{chronological_split, Partition, DEFAULT_RATIOS};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(name = "fraudgraph", version, about = "Graph-based fraud scoring with subgraph explanations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic transaction log with planted fraud patterns.
    Gen(GenArgs),
    /// Build the transaction graph from a CSV log.
    Ingest(IngestArgs),
    /// Train the graph predictor and write a checkpoint.
    Train(TrainArgs),
    /// Compare the predictor against the baselines over several seeds.
    Bench(BenchArgs),
    /// Score transactions with a trained checkpoint.
    Score(ScoreArgs),
    /// Explain one transaction's score.
    Explain(ExplainArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n_txn: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Where to write the planted-pattern ground truth (JSON).
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long)]
    pub fraud_rate: Option<f64>,
    /// Give fraud the same feature distribution as legitimate traffic.
    #[arg(long)]
    pub topology_only: bool,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[arg(short, long)]
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    /// Entities linked to fewer transactions are dropped.
    #[arg(long, default_value_t = DEFAULT_MIN_ENTITY_DEGREE)]
    pub min_degree: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Desk,
    Full,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Graph as JSON lines, or a CSV log.
    #[arg(long, env = "GRAPH")]
    pub graph: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Write the per-epoch report (JSON) here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 10_000)]
    pub n_txn: usize,
    /// Data generation seed.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Models to run, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "lr,dnn,gcn,hgat")]
    pub models: Vec<String>,
    /// Number of training seeds per model.
    #[arg(long, default_value_t = 5)]
    pub runs: u64,
    #[arg(long)]
    pub topology_only: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Write the reports (JSON) here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long, env = "GRAPH")]
    pub graph: PathBuf,
    #[arg(long, env = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Transaction ids; defaults to the whole partition given by --part.
    #[arg(long)]
    pub txn: Vec<String>,
    #[arg(long, default_value = "test")]
    pub part: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Dot,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long, env = "GRAPH")]
    pub graph: PathBuf,
    #[arg(long, env = "CHECKPOINT")]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub txn: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "GRAPH")]
    pub graph: Option<PathBuf>,
    #[arg(long, env = "CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_WORKERS)]
    pub workers: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

/// Writes to `path`, or stdout when absent.
fn emit(path: Option<&Path>, body: &str) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = create(p)?;
            w.write_all(body.as_bytes())?;
            w.flush()?;
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(body.as_bytes())?;
            out.flush()?;
        }
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Ingest(a) => ingest(a),
        Command::Train(a) => train_cmd(a),
        Command::Bench(a) => bench(a),
        Command::Score(a) => score(a),
        Command::Explain(a) => explain(a),
        Command::Serve(a) => serve(a),
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let mut cfg = GenConfig { topology_only: a.topology_only, ..GenConfig::new(a.n_txn, a.seed) };
    if let Some(rate) = a.fraud_rate {
        cfg.fraud_rate = rate;
    }
    let (records, truth) = generate(&cfg)?;
    let mut w = create(&a.output)?;
    write_log(&records, &mut w)?;
    w.flush()?;
    if let Some(p) = &a.truth {
        let mut w = create(p)?;
        truth.write_json(&mut w)?;
        w.flush()?;
    }
    let fraud = records.iter().filter(|r| r.label.is_fraud()).count();
    eprintln!("wrote {} transactions ({fraud} fraud) to {}", records.len(), a.output.display());
    Ok(())
}

fn ingest(a: IngestArgs) -> Result<()> {
    let records = read_log(File::open(&a.input).with_context(|| format!("opening {}", a.input.display()))?)?;
    let g = build_graph(&records)?.filter_low_degree(a.min_degree)?;
    let mut w = create(&a.output)?;
    g.write_jsonl(&mut w)?;
    w.flush()?;
    let counts = g.type_counts();
    eprintln!("graph: {} nodes {:?}, {} edges", g.num_nodes(), counts, g.num_edges());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let split = chronological_split(&g, DEFAULT_RATIOS)?;
    let (model_cfg, mut cfg) = match a.preset {
        Preset::Desk => (PredictorConfig::desk(), TrainConfig::desk()),
        Preset::Full => (PredictorConfig::full(), TrainConfig::full()),
    };
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if let Some(p) = a.patience {
        cfg.patience = p;
    }
    let (model, report) = train(&g, &split, &model_cfg, &cfg, a.seed)?;
    for e in &report.epochs {
        eprintln!(
            "epoch {:>3} loss {:.4} val {:.4}{} {:.1}s",
            e.epoch,
            e.train_loss,
            e.val_metric,
            if e.improved { " *" } else { "" },
            e.seconds
        );
    }
    eprintln!("best epoch {} val {:.4}", report.best_epoch, report.best_val_metric);
    save_checkpoint(&model, &a.output)?;
    if let Some(p) = &a.report {
        emit(Some(p), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let models = a
        .models
        .iter()
        .map(|m| ModelKind::parse(m).with_context(|| format!("unknown model {m:?}")))
        .collect::<Result<Vec<_>>>()?;
    let data = Dataset::generate(&GenConfig { topology_only: a.topology_only, ..GenConfig::new(a.n_txn, a.seed) })?;
    let mut cfg = ExperimentConfig::desk();
    cfg.seeds = (0..a.runs).collect();
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
        cfg.mlp_train.max_epochs = e;
        cfg.gcn_train.max_epochs = e;
    }
    let reports = run_experiment(&models, &data, &cfg);
    print!("{}", render_table(&reports));
    if let Some(p) = &a.json {
        emit(Some(p), &serde_json::to_string_pretty(&reports)?)?;
    }
    if let Some(r) = reports.iter().find(|r| r.error.is_some()) {
        bail!("{} failed: {}", r.model, r.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn txn_ids(g: &HeteroGraph, ids: &[String]) -> Result<Vec<usize>> {
    ids.iter().map(|id| g.node_id(id).filter(|&v| g.label(v).is_some()).with_context(|| format!("unknown transaction {id:?}"))).collect()
}

fn score(a: ScoreArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let ids = if a.txn.is_empty() {
        let part = Partition::parse(&a.part).with_context(|| format!("unknown part {:?}", a.part))?;
        chronological_split(&g, DEFAULT_RATIOS)?.part(part).to_vec()
    } else {
        txn_ids(&g, &a.txn)?
    };
    let mut out = String::new();
    for s in model.predict(&g, &ids)? {
        out.push_str(&serde_json::to_string(&s)?);
        out.push('\n');
    }
    emit(None, &out)
}

fn explain(a: ExplainArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.threshold) {
        bail!("threshold must lie in [0, 1]");
    }
    let g = load_graph(&a.graph)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let v = txn_ids(&g, std::slice::from_ref(&a.txn))?[0];
    let cs = extract_subgraph(&g, v, model.config.n_layers)?;
    let cfg = ExplainerConfig { epochs: a.epochs, seed: a.seed, ..ExplainerConfig::default() };
    let res = optimize_masks(&model, &g, &cs, &cfg)?;
    let e = export_explanation(&g, &cs, &res.masks, a.threshold);
    let body = match a.format {
        Format::Json => serde_json::to_string_pretty(&e)? + "\n",
        Format::Dot => e.to_dot(),
    };
    eprintln!(
        "{}: p(fraud) {:.4}, {} of {} edges at or above {}",
        a.txn,
        res.fraud_probability,
        e.edges.len(),
        cs.num_edges(),
        a.threshold
    );
    emit(a.output.as_deref(), &body)
}

fn serve(a: ServeArgs) -> Result<()> {
    let graph = a.graph.as_deref().map(load_graph).transpose()?;
    let model = a.checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let snapshot = match graph {
        Some(g) => Some(Snapshot::new(g, model, 1)?),
        None if model.is_some() => bail!("a checkpoint needs a graph (--graph or GRAPH)"),
        None => None,
    };
    let state = ServiceState::with_paths(snapshot, a.workers, a.graph.clone(), a.checkpoint.clone());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((a.host.as_str(), a.port)).await?;
        eprintln!("listening on {}", listener.local_addr()?);
        axum::serve(listener, service::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}
