//! HTTP service over a loaded graph and checkpoint.
//!
//! Every GET is answered from an immutable snapshot, so repeated requests
//! return identical bodies until the next reload. Explanations run as
//! background jobs on a small blocking pool and are cached per
//! `(txn, epochs, seed)`; the cache is dropped whenever a checkpoint loads.

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fraudgraph_core::explainer::{
    export_explanation, extract_subgraph, optimize_masks, project_features_2d, Explanation, ExplainerConfig, DEFAULT_THRESHOLD,
};
use fraudgraph_core::hetgraph::{HeteroGraph, NodeType};
use fraudgraph_core::predictor::{load_checkpoint, Predictor};
use fraudgraph_core::sampler::{chronological_split, khop_ball, Partition, DEFAULT_RATIOS};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use tokio::sync::Semaphore;

pub const API_VERSION: u32 = 1;
pub const DEFAULT_WORKERS: usize = 2;
const MAX_HOPS: usize = 4;
const MAX_PAGE: usize = 1000;
const MAX_EXPLAIN_EPOCHS: usize = 1000;

/// Graph, model and everything derived from them at load time.
pub struct Snapshot {
    pub graph: HeteroGraph,
    pub model: Option<Predictor>,
    /// Fraud probability per node; `None` for entities or without a model.
    pub scores: Vec<Option<f64>>,
    pub parts: Vec<Option<Partition>>,
    pub generation: u64,
}

impl Snapshot {
    pub fn new(graph: HeteroGraph, model: Option<Predictor>, generation: u64) -> anyhow::Result<Self> {
        let mut scores = vec![None; graph.num_nodes()];
        if let Some(m) = &model {
            if m.feature_dim != graph.feature_dim() {
                anyhow::bail!("checkpoint expects {} features, graph has {}", m.feature_dim, graph.feature_dim());
            }
            let txns: Vec<usize> = graph.txn_nodes().collect();
            for s in m.predict(&graph, &txns)? {
                scores[s.node] = Some(s.fraud_probability);
            }
        }
        let parts = match chronological_split(&graph, DEFAULT_RATIOS) {
            Ok(split) => split.tags(graph.num_nodes()),
            Err(_) => vec![None; graph.num_nodes()],
        };
        Ok(Self { graph, model, scores, parts, generation })
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
pub struct Job {
    pub v: u32,
    pub job: u64,
    pub txn_id: String,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explanation: Option<Explanation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    threshold: f64,
}

type CacheKey = (String, usize, u64);

pub struct ServiceState {
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    reloading: AtomicBool,
    generation: AtomicU64,
    next_job: AtomicU64,
    jobs: Mutex<HashMap<u64, Job>>,
    /// Explanations exported at threshold 0, tagged with the generation they
    /// were computed under.
    cache: Mutex<HashMap<CacheKey, (u64, Explanation)>>,
    workers: Arc<Semaphore>,
    graph_path: Option<PathBuf>,
    checkpoint_path: Mutex<Option<PathBuf>>,
}

pub type SharedState = Arc<ServiceState>;

impl ServiceState {
    pub fn new(snapshot: Option<Snapshot>, workers: usize) -> SharedState {
        Self::with_paths(snapshot, workers, None, None)
    }

    pub fn with_paths(
        snapshot: Option<Snapshot>,
        workers: usize,
        graph_path: Option<PathBuf>,
        checkpoint_path: Option<PathBuf>,
    ) -> SharedState {
        let generation = snapshot.as_ref().map_or(0, |s| s.generation);
        Arc::new(Self {
            snapshot: RwLock::new(snapshot.map(Arc::new)),
            reloading: AtomicBool::new(false),
            generation: AtomicU64::new(generation),
            next_job: AtomicU64::new(1),
            jobs: Mutex::new(HashMap::new()),
            cache: Mutex::new(HashMap::new()),
            workers: Arc::new(Semaphore::new(workers.max(1))),
            graph_path,
            checkpoint_path: Mutex::new(checkpoint_path),
        })
    }

    fn current(&self) -> Result<Option<Arc<Snapshot>>, ApiError> {
        if self.reloading.load(Ordering::SeqCst) {
            return Err(ApiError::conflict("checkpoint reload in progress"));
        }
        Ok(self.snapshot.read().expect("snapshot lock").clone())
    }

    fn loaded(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.current()?.ok_or_else(|| ApiError::conflict("no graph loaded"))
    }

    /// Swaps in a new snapshot and forgets every cached explanation.
    pub fn install(&self, graph: HeteroGraph, model: Option<Predictor>) -> anyhow::Result<u64> {
        let generation = self.generation.load(Ordering::SeqCst) + 1;
        let snap = Snapshot::new(graph, model, generation)?;
        let mut slot = self.snapshot.write().expect("snapshot lock");
        self.cache.lock().expect("cache lock").clear();
        self.generation.store(generation, Ordering::SeqCst);
        *slot = Some(Arc::new(snap));
        Ok(generation)
    }
}

/// Loads a graph from JSON lines, or builds one from a CSV log.
pub fn load_graph(path: &std::path::Path) -> anyhow::Result<HeteroGraph> {
    let file = std::fs::File::open(path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
    if path.extension().is_some_and(|e| e == "csv") {
        let records = fraudgraph_core::datagen::read_log(file)?;
        let g = fraudgraph_core::hetgraph::build_graph(&records)?;
        Ok(g.filter_low_degree(fraudgraph_core::experiment::DEFAULT_MIN_ENTITY_DEGREE)?)
    } else {
        Ok(HeteroGraph::read_jsonl(std::io::BufReader::new(file))?)
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    msg: String,
}

impl ApiError {
    fn new(status: StatusCode, msg: impl Into<String>) -> Self {
        Self { status, msg: msg.into() }
    }

    fn not_found(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, msg)
    }

    fn bad_request(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, msg)
    }

    fn conflict(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, msg)
    }

    fn internal(msg: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "v": API_VERSION, "error": self.msg }))).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: SharedState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/transactions", get(list_transactions))
        .route("/transactions/{id}", get(get_transaction))
        .route("/neighborhood/{id}", get(neighborhood))
        .route("/explain", post(start_explain))
        .route("/explain/{job}", get(poll_explain))
        .route("/timeline/{entity_id}", get(timeline))
        .route("/project", post(project))
        .route("/admin/reload", post(reload))
        .with_state(state)
}

async fn health(State(st): State<SharedState>) -> Json<Value> {
    if st.reloading.load(Ordering::SeqCst) {
        return Json(json!({ "v": API_VERSION, "status": "reloading" }));
    }
    let snap = st.snapshot.read().expect("snapshot lock").clone();
    Json(match snap {
        None => json!({ "v": API_VERSION, "status": "no_model", "graph": false }),
        Some(s) => json!({
            "v": API_VERSION,
            "status": if s.model.is_some() { "ok" } else { "no_model" },
            "graph": true,
            "nodes": s.graph.num_nodes(),
            "edges": s.graph.num_edges(),
            "transactions": s.graph.txn_nodes().count(),
            "generation": s.generation,
        }),
    })
}

fn part_name(p: Option<Partition>) -> Option<&'static str> {
    p.map(|p| match p {
        Partition::Train => "train",
        Partition::Val => "val",
        Partition::Test => "test",
    })
}

fn txn_summary(s: &Snapshot, v: usize) -> Value {
    let node = s.graph.node(v);
    json!({
        "id": node.name,
        "score": s.scores[v],
        "label": node.label.map(|l| l.as_u8()),
        "timestamp": node.timestamp,
        "part": part_name(s.parts[v]),
    })
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    part: Option<String>,
    sort: Option<String>,
    offset: Option<usize>,
    limit: Option<usize>,
}

async fn list_transactions(State(st): State<SharedState>, Query(q): Query<ListQuery>) -> ApiResult<Json<Value>> {
    let s = st.loaded()?;
    let part = match q.part.as_deref() {
        None | Some("all") => None,
        Some(p) => Some(Partition::parse(p).ok_or_else(|| ApiError::bad_request(format!("unknown part {p:?}")))?),
    };
    let mut ids: Vec<usize> = s.graph.txn_nodes().filter(|&v| part.is_none() || s.parts[v] == part).collect();
    match q.sort.as_deref() {
        None | Some("time") => ids.sort_by_key(|&v| (s.graph.node(v).timestamp, v)),
        Some("score") => {
            if s.model.is_none() {
                return Err(ApiError::conflict("no model loaded"));
            }
            // Highest risk first; ties by id for a stable order.
            ids.sort_by(|&a, &b| s.scores[b].unwrap_or(0.0).total_cmp(&s.scores[a].unwrap_or(0.0)).then(a.cmp(&b)));
        }
        Some(other) => return Err(ApiError::bad_request(format!("unknown sort {other:?}"))),
    }
    let offset = q.offset.unwrap_or(0);
    let limit = q.limit.unwrap_or(50).min(MAX_PAGE);
    let items: Vec<Value> = ids.iter().skip(offset).take(limit).map(|&v| txn_summary(&s, v)).collect();
    Ok(Json(json!({ "v": API_VERSION, "total": ids.len(), "offset": offset, "limit": limit, "items": items })))
}

fn txn_node(s: &Snapshot, id: &str) -> ApiResult<usize> {
    match s.graph.node_id(id) {
        Some(v) if s.graph.node_type(v) == NodeType::Txn => Ok(v),
        _ => Err(ApiError::not_found(format!("unknown transaction {id:?}"))),
    }
}

async fn get_transaction(State(st): State<SharedState>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.loaded()?;
    let v = txn_node(&s, &id)?;
    let mut body = txn_summary(&s, v);
    body["v"] = json!(API_VERSION);
    body["features"] = json!(s.graph.features(v));
    let entities: Vec<Value> = s
        .graph
        .neighbors(v)
        .map_err(|e| ApiError::internal(e.to_string()))?
        .iter()
        .map(|nb| json!({ "id": s.graph.node(nb.node).name, "etype": nb.etype }))
        .collect();
    body["entities"] = json!(entities);
    Ok(Json(body))
}

#[derive(Debug, Deserialize)]
struct HopsQuery {
    hops: Option<usize>,
}

async fn neighborhood(State(st): State<SharedState>, Path(id): Path<String>, Query(q): Query<HopsQuery>) -> ApiResult<Json<Value>> {
    let s = st.loaded()?;
    let v = s.graph.node_id(&id).ok_or_else(|| ApiError::not_found(format!("unknown node {id:?}")))?;
    let hops = q.hops.unwrap_or(2);
    if hops > MAX_HOPS {
        return Err(ApiError::bad_request(format!("hops must be at most {MAX_HOPS}")));
    }
    let ball = khop_ball(&s.graph, &[v], hops).map_err(|e| ApiError::internal(e.to_string()))?;
    let nodes: Vec<Value> = ball
        .nodes
        .iter()
        .zip(&ball.hops)
        .map(|(&u, &h)| {
            let node = s.graph.node(u);
            json!({
                "id": node.name,
                "type": node.ntype,
                "label": node.label.map(|l| l.as_u8()),
                "hop": h,
                "score": s.scores[u],
            })
        })
        .collect();
    let edges: Vec<Value> = ball
        .edges
        .iter()
        .map(|&e| {
            let edge = s.graph.edge(e);
            json!({ "src": s.graph.node(edge.txn).name, "dst": s.graph.node(edge.entity).name, "etype": edge.etype })
        })
        .collect();
    Ok(Json(json!({ "v": API_VERSION, "center": id, "hops": hops, "nodes": nodes, "edges": edges })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExplainRequest {
    txn_id: String,
    threshold: Option<f64>,
    epochs: Option<usize>,
    seed: Option<u64>,
}

fn explain_blocking(s: &Snapshot, v: usize, cfg: &ExplainerConfig) -> anyhow::Result<Explanation> {
    let model = s.model.as_ref().ok_or_else(|| anyhow::anyhow!("no model loaded"))?;
    let cs = extract_subgraph(&s.graph, v, model.config.n_layers)?;
    let res = optimize_masks(model, &s.graph, &cs, cfg)?;
    Ok(export_explanation(&s.graph, &cs, &res.masks, 0.0))
}

async fn start_explain(
    State(st): State<SharedState>,
    body: Result<Json<ExplainRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Job>)> {
    let Json(req) = body?;
    let threshold = req.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError::bad_request("threshold must lie in [0, 1]"));
    }
    let defaults = ExplainerConfig::default();
    let epochs = req.epochs.unwrap_or(defaults.epochs);
    if epochs > MAX_EXPLAIN_EPOCHS {
        return Err(ApiError::bad_request(format!("epochs must be at most {MAX_EXPLAIN_EPOCHS}")));
    }
    let cfg = ExplainerConfig { epochs, seed: req.seed.unwrap_or(defaults.seed), ..defaults };
    let s = st.loaded()?;
    let v = txn_node(&s, &req.txn_id)?;
    if s.model.is_none() {
        return Err(ApiError::conflict("no model loaded"));
    }
    let id = st.next_job.fetch_add(1, Ordering::SeqCst);
    let key: CacheKey = (req.txn_id.clone(), cfg.epochs, cfg.seed);
    let cached = st.cache.lock().expect("cache lock").get(&key).filter(|(g, _)| *g == s.generation).map(|(_, e)| e.clone());
    let mut job =
        Job { v: API_VERSION, job: id, txn_id: req.txn_id, status: JobStatus::Queued, explanation: None, error: None, threshold };
    if let Some(full) = cached {
        job.status = JobStatus::Done;
        job.explanation = Some(full.with_threshold(threshold));
        st.jobs.lock().expect("jobs lock").insert(id, job.clone());
        return Ok((StatusCode::OK, Json(job)));
    }
    st.jobs.lock().expect("jobs lock").insert(id, job.clone());
    let worker = st.clone();
    tokio::spawn(async move {
        let _permit = worker.workers.clone().acquire_owned().await.expect("pool open");
        if let Some(j) = worker.jobs.lock().expect("jobs lock").get_mut(&id) {
            j.status = JobStatus::Running;
        }
        let snap = s.clone();
        let run_cfg = cfg.clone();
        let result = tokio::task::spawn_blocking(move || explain_blocking(&snap, v, &run_cfg)).await;
        let result = match result {
            Ok(r) => r,
            Err(e) => Err(anyhow::anyhow!("explanation task failed: {e}")),
        };
        let mut jobs = worker.jobs.lock().expect("jobs lock");
        let Some(j) = jobs.get_mut(&id) else { return };
        match result {
            Ok(full) => {
                if worker.generation.load(Ordering::SeqCst) == s.generation {
                    worker.cache.lock().expect("cache lock").insert(key, (s.generation, full.clone()));
                }
                j.explanation = Some(full.with_threshold(j.threshold));
                j.status = JobStatus::Done;
            }
            Err(e) => {
                j.error = Some(e.to_string());
                j.status = JobStatus::Failed;
            }
        }
    });
    Ok((StatusCode::ACCEPTED, Json(job)))
}

async fn poll_explain(State(st): State<SharedState>, Path(job): Path<u64>) -> ApiResult<Json<Job>> {
    let jobs = st.jobs.lock().expect("jobs lock");
    jobs.get(&job).cloned().map(Json).ok_or_else(|| ApiError::not_found(format!("unknown job {job}")))
}

async fn timeline(State(st): State<SharedState>, Path(entity_id): Path<String>) -> ApiResult<Json<Value>> {
    let s = st.loaded()?;
    let v = match s.graph.node_id(&entity_id) {
        Some(v) if s.graph.node_type(v) != NodeType::Txn => v,
        _ => return Err(ApiError::not_found(format!("unknown entity {entity_id:?}"))),
    };
    let mut txns: Vec<usize> = s.graph.adjacency(v).0.to_vec();
    txns.sort_by_key(|&t| (s.graph.node(t).timestamp, t));
    let items: Vec<Value> = txns.iter().map(|&t| txn_summary(&s, t)).collect();
    Ok(Json(json!({ "v": API_VERSION, "entity": entity_id, "type": s.graph.node_type(v), "items": items })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectRequest {
    node_ids: Vec<String>,
}

async fn project(State(st): State<SharedState>, body: Result<Json<ProjectRequest>, JsonRejection>) -> ApiResult<Json<Value>> {
    let Json(req) = body?;
    let s = st.loaded()?;
    let rows = req
        .node_ids
        .iter()
        .map(|id| {
            let v = txn_node(&s, id)?;
            Ok(s.graph.features(v).expect("transactions carry features").to_vec())
        })
        .collect::<ApiResult<Vec<_>>>()?;
    let p = project_features_2d(&rows).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let coords: Vec<Value> = req.node_ids.iter().zip(&p.coords).map(|(id, c)| json!({ "id": id, "x": c[0], "y": c[1] })).collect();
    Ok(Json(json!({ "v": API_VERSION, "coords": coords, "explained_variance": p.explained_variance })))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReloadRequest {
    checkpoint: Option<PathBuf>,
}

/// Resets the reload flag however the reload ends.
struct ReloadGuard<'a>(&'a AtomicBool);

impl Drop for ReloadGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

async fn reload(State(st): State<SharedState>, body: Option<Json<ReloadRequest>>) -> ApiResult<Json<Value>> {
    let req = body.map(|Json(r)| r).unwrap_or_default();
    if st.reloading.swap(true, Ordering::SeqCst) {
        return Err(ApiError::conflict("checkpoint reload in progress"));
    }
    let _guard = ReloadGuard(&st.reloading);
    let ckpt = match req.checkpoint {
        Some(p) => Some(p),
        None => st.checkpoint_path.lock().expect("path lock").clone(),
    };
    let ckpt = ckpt.ok_or_else(|| ApiError::bad_request("no checkpoint path given"))?;
    let current = st.snapshot.read().expect("snapshot lock").clone();
    let graph_path = st.graph_path.clone();
    let path = ckpt.clone();
    let loaded = tokio::task::spawn_blocking(move || -> anyhow::Result<(HeteroGraph, Predictor)> {
        let graph = match (&current, &graph_path) {
            (Some(s), _) => s.graph.clone(),
            (None, Some(p)) => load_graph(p)?,
            (None, None) => anyhow::bail!("no graph to attach the checkpoint to"),
        };
        let model = load_checkpoint(&path).map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))?;
        Ok((graph, model))
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
    .map_err(|e| ApiError::bad_request(e.to_string()))?;
    let st2 = st.clone();
    let generation = tokio::task::spawn_blocking(move || st2.install(loaded.0, Some(loaded.1)))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
        .map_err(|e| ApiError::bad_request(e.to_string()))?;
    *st.checkpoint_path.lock().expect("path lock") = Some(ckpt);
    Ok(Json(json!({ "v": API_VERSION, "status": "ok", "generation": generation })))
}

/// Marks the service as reloading, for exercising the 409 path.
#[doc(hidden)]
pub fn set_reloading(st: &ServiceState, on: bool) {
    st.reloading.store(on, Ordering::SeqCst);
}
