//! End-to-end comparison runs: build a dataset once, then train each model
//! under several seeds and report test AUC.

use crate::baselines::{train_dnn, train_gcn_homogeneous, train_lr, FeatureTable, GcnInputs};
use crate::datagen::{generate, GenConfig, GroundTruth};
use crate::error::{invalid, Result};
use crate::hetgraph::{build_graph, build_homogeneous_view, HeteroGraph, TransactionRecord};
use crate::metrics::{auc, ExperimentReport, GraphKind};
use crate::predictor::{train, PredictorConfig, TrainConfig};
use crate::sampler::{chronological_split, SplitAssignment, DEFAULT_RATIOS};
use crate::tensor::AdamWConfig;
use serde::{Deserialize, Serialize};
use std::time::Instant;

pub const DEFAULT_MIN_ENTITY_DEGREE: usize = 2;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<TransactionRecord>,
    pub truth: GroundTruth,
    /// Graph after low-degree filtering.
    pub graph: HeteroGraph,
    pub split: SplitAssignment,
}

impl Dataset {
    pub fn generate(cfg: &GenConfig) -> Result<Self> {
        let (records, truth) = generate(cfg)?;
        Self::from_records(records, truth, DEFAULT_MIN_ENTITY_DEGREE, DEFAULT_RATIOS)
    }

    pub fn from_records(
        records: Vec<TransactionRecord>,
        truth: GroundTruth,
        min_entity_degree: usize,
        ratios: (f64, f64, f64),
    ) -> Result<Self> {
        let graph = build_graph(&records)?.filter_low_degree(min_entity_degree)?;
        let split = chronological_split(&graph, ratios)?;
        Ok(Self { records, truth, graph, split })
    }

    pub fn test_truth(&self) -> Result<Vec<bool>> {
        self.split
            .test
            .iter()
            .map(|&v| self.graph.label(v).map(|l| l.is_fraud()).ok_or_else(|| invalid("unlabeled test transaction")))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Lr,
    Dnn,
    Gcn,
    Hgat,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Lr, ModelKind::Dnn, ModelKind::Gcn, ModelKind::Hgat];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lr => "lr",
            ModelKind::Dnn => "dnn",
            ModelKind::Gcn => "gcn",
            ModelKind::Hgat => "hgat",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.as_str() == s)
    }

    pub fn graph(self) -> GraphKind {
        match self {
            ModelKind::Lr | ModelKind::Dnn => GraphKind::None,
            ModelKind::Gcn => GraphKind::Homogeneous,
            ModelKind::Hgat => GraphKind::Heterogeneous,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    /// Used by the feature-only baselines.
    pub mlp_train: TrainConfig,
    /// The convolution baseline propagates over the whole graph every step,
    /// so it runs few large steps.
    pub gcn_train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let train = TrainConfig::desk();
        Self {
            predictor: PredictorConfig::desk(),
            mlp_train: train.clone(),
            gcn_train: TrainConfig {
                n_batch: 1024,
                max_epochs: 40,
                patience: 6,
                optimizer: AdamWConfig { lr: 0.005, ..AdamWConfig::default() },
                ..train.clone()
            },
            train,
            seeds: vec![0, 1, 2, 3, 4],
        }
    }
}

/// Test-partition result of one training run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub auc: f64,
    pub seconds: f64,
    pub test_scores: Vec<f64>,
}

pub fn run_model(kind: ModelKind, data: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<RunOutcome> {
    let start = Instant::now();
    let scores = match kind {
        ModelKind::Lr => train_lr(&FeatureTable::from_graph(&data.graph)?, &data.split, &cfg.mlp_train, seed)?.1.test_scores,
        ModelKind::Dnn => {
            let table = FeatureTable::from_graph(&data.graph)?;
            train_dnn(&table, &data.split, cfg.predictor.n_ff, cfg.predictor.dropout, &cfg.mlp_train, seed)?.1.test_scores
        }
        ModelKind::Gcn => {
            let inputs = GcnInputs::new(&data.graph, &build_homogeneous_view(&data.graph))?;
            train_gcn_homogeneous(&data.graph, &inputs, &data.split, &cfg.predictor, &cfg.gcn_train, seed)?.1.test_scores
        }
        ModelKind::Hgat => {
            let (model, _) = train(&data.graph, &data.split, &cfg.predictor, &cfg.train, seed)?;
            model.predict(&data.graph, &data.split.test)?.into_iter().map(|s| s.fraud_probability).collect()
        }
    };
    let value = auc(&scores, &data.test_truth()?)?;
    Ok(RunOutcome { auc: value, seconds: start.elapsed().as_secs_f64(), test_scores: scores })
}

/// One report per model. A failing run marks its report but does not stop
/// the remaining models.
pub fn run_experiment(models: &[ModelKind], data: &Dataset, cfg: &ExperimentConfig) -> Vec<ExperimentReport> {
    models
        .iter()
        .map(|&kind| {
            let mut aucs = Vec::new();
            let mut secs = Vec::new();
            let mut error = None;
            for &seed in &cfg.seeds {
                match run_model(kind, data, cfg, seed) {
                    Ok(r) => {
                        aucs.push(r.auc);
                        secs.push(r.seconds);
                    }
                    Err(e) => {
                        error.get_or_insert_with(|| format!("seed {seed}: {e}"));
                    }
                }
            }
            let mut report = ExperimentReport::from_runs(kind.as_str(), kind.graph(), cfg.seeds.clone(), aucs, secs);
            report.error = error;
            report
        })
        .collect()
}
