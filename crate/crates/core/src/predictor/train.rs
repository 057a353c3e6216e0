use super::{nll_loss, GraphView, Predictor, PredictorConfig};
use crate::error::{invalid, Error, Result};
use crate::hetgraph::{HeteroGraph, Label, NodeId};
use crate::metrics::auc;
use crate::sampler::{minibatches, sample_khop, SplitAssignment, DEFAULT_FANOUT};
use crate::tensor::{AdamW, AdamWConfig, Mode, ParamStore, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub n_batch: usize,
    pub max_epochs: usize,
    /// Epochs without validation improvement tolerated before stopping.
    pub patience: usize,
    pub optimizer: AdamWConfig,
    /// Sampling depth; defaults to the number of layers.
    pub hops: Option<usize>,
    /// Per-node neighbor cap while sampling; `None` keeps every neighbor.
    pub fanout: Option<usize>,
    /// Loss weights for (legit, fraud); unweighted when absent.
    pub class_weights: Option<[f64; 2]>,
    /// Also score the whole training partition in eval mode after each epoch.
    #[serde(default)]
    pub track_train_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            n_batch: 32,
            max_epochs: 30,
            patience: 5,
            optimizer: AdamWConfig::default(),
            hops: None,
            fanout: Some(DEFAULT_FANOUT),
            class_weights: None,
            track_train_loss: false,
        }
    }

    pub fn full() -> Self {
        Self { max_epochs: 128, patience: 32, hops: Some(crate::sampler::DEFAULT_HOPS), ..Self::desk() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean mini-batch loss seen during the epoch, dropout included.
    pub train_loss: f64,
    /// Eval-mode loss over the training partition after the epoch's updates.
    #[serde(default)]
    pub train_eval_loss: Option<f64>,
    /// Validation AUC when both classes are present in the validation set.
    pub val_auc: Option<f64>,
    /// Model-selection score: the AUC, or the mean validation log-likelihood
    /// when the AUC is undefined.
    pub val_metric: f64,
    pub improved: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub seconds: f64,
}

/// A model the shared early-stopping loop can fit.
pub(crate) trait Trainable {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn batch_loss(&self, tape: &mut Tape, seeds: &[NodeId], rng: &mut ChaCha8Rng) -> Result<Var>;
    fn fraud_scores(&self, ids: &[NodeId]) -> Result<Vec<f64>>;
}

/// Mini-batch AdamW with early stopping on the validation metric; leaves the
/// best-on-validation parameters in `model`.
pub(crate) fn fit<M: Trainable>(
    model: &mut M,
    train_ids: &[NodeId],
    val_ids: &[NodeId],
    train_labels: &[Label],
    val_labels: &[Label],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainReport> {
    if cfg.max_epochs == 0 {
        return Err(invalid("max_epochs must be at least 1"));
    }
    if val_ids.is_empty() {
        return Err(invalid("validation partition is empty"));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(cfg.optimizer);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut since_best = 0;
    let mut epochs = Vec::new();
    let truth: Vec<bool> = val_labels.iter().map(|l| l.is_fraud()).collect();
    for epoch in 0..cfg.max_epochs {
        let t0 = Instant::now();
        let batches = minibatches(train_ids, cfg.n_batch, rng)?;
        let mut total = 0.0;
        for (step, seeds) in batches.iter().enumerate() {
            let mut tape = Tape::new();
            let loss = model.batch_loss(&mut tape, seeds, rng)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step, loss: value });
            }
            total += value;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(&tape, model.store_mut());
            opt.step(model.store_mut())?;
        }
        let scores = model.fraud_scores(val_ids)?;
        let val_auc = auc(&scores, &truth).ok();
        let val_metric = match val_auc {
            Some(a) => a,
            None => -mean_nll(&scores, val_labels),
        };
        let train_eval_loss = if cfg.track_train_loss {
            weighted_nll(&model.fraud_scores(train_ids)?, train_labels, cfg.class_weights)
        } else {
            None
        };
        let improved = best.as_ref().is_none_or(|b| val_metric > b.0);
        if improved {
            best = Some((val_metric, epoch, model.store().clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        epochs.push(EpochLog {
            epoch,
            train_loss: total / batches.len() as f64,
            train_eval_loss,
            val_auc,
            val_metric,
            improved,
            seconds: t0.elapsed().as_secs_f64(),
        });
        if since_best > cfg.patience {
            break;
        }
    }
    let (best_val_metric, best_epoch, params) = best.expect("at least one epoch ran");
    model.store_mut().copy_values_from(&params);
    Ok(TrainReport { epochs, best_epoch, best_val_metric, seconds: start.elapsed().as_secs_f64() })
}

fn mean_nll(scores: &[f64], labels: &[Label]) -> f64 {
    weighted_nll(scores, labels, None).unwrap_or(0.0)
}

/// Same weighting as `nll_loss`: sum of weighted terms over the sum of weights.
fn weighted_nll(scores: &[f64], labels: &[Label], weights: Option<[f64; 2]>) -> Option<f64> {
    let w = weights.unwrap_or([1.0, 1.0]);
    let (mut num, mut den) = (0.0, 0.0);
    for (&p, l) in scores.iter().zip(labels) {
        let (q, wi) = if l.is_fraud() { (p, w[1]) } else { (1.0 - p, w[0]) };
        num -= wi * (q + super::LOG_EPS).ln();
        den += wi;
    }
    (den > 0.0).then(|| num / den)
}

struct PredictorTask<'a> {
    model: Predictor,
    g: &'a HeteroGraph,
    cfg: &'a TrainConfig,
}

impl Trainable for PredictorTask<'_> {
    fn store(&self) -> &ParamStore {
        self.model.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn batch_loss(&self, tape: &mut Tape, seeds: &[NodeId], rng: &mut ChaCha8Rng) -> Result<Var> {
        let hops = self.cfg.hops.unwrap_or(self.model.config.n_layers);
        let sub = sample_khop(self.g, seeds, hops, self.cfg.fanout, rng)?;
        let view = GraphView::from_subgraph(self.g, &sub)?;
        let targets: Vec<usize> = (0..sub.seeds.len()).collect();
        let labels = sub
            .seeds
            .iter()
            .map(|&s| self.g.label(s).ok_or_else(|| invalid(format!("transaction {} has no label", self.g.node(s).name))))
            .collect::<Result<Vec<_>>>()?;
        let enc = self.model.encode(tape, &view, Mode::Train, rng, None)?;
        let probs = self.model.head(tape, &enc, &view, &targets, Mode::Train, rng)?;
        nll_loss(tape, probs, &labels, self.cfg.class_weights)
    }

    fn fraud_scores(&self, ids: &[NodeId]) -> Result<Vec<f64>> {
        Ok(self.model.predict(self.g, ids)?.into_iter().map(|s| s.fraud_probability).collect())
    }
}

pub(crate) fn labels_of(g: &HeteroGraph, ids: &[NodeId]) -> Result<Vec<Label>> {
    ids.iter()
        .map(|&v| g.label(v).ok_or_else(|| invalid(format!("transaction {} has no label", g.node(v).name))))
        .collect()
}

/// Trains a predictor on the training partition, selecting parameters by
/// validation score. Deterministic for a fixed `seed`.
pub fn train(
    g: &HeteroGraph,
    split: &SplitAssignment,
    model_cfg: &PredictorConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Predictor, TrainReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Predictor::with_rng(model_cfg.clone(), g.feature_dim(), seed, &mut rng)?;
    let (train_labels, val_labels) = (labels_of(g, &split.train)?, labels_of(g, &split.val)?);
    let mut task = PredictorTask { model, g, cfg };
    let report = fit(&mut task, &split.train, &split.val, &train_labels, &val_labels, cfg, &mut rng)?;
    Ok((task.model, report))
}
