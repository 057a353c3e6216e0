//! Comparison models: logistic regression and a feed-forward network on
//! transaction features alone, and a graph convolution network on the
//! transaction-only graph.

use crate::error::{invalid, Result};
use crate::hetgraph::{HeteroGraph, HomogeneousView, Label, NodeId};
use crate::predictor::{nll_loss, PredictorConfig, TrainConfig, TrainReport};
use crate::predictor::train::{fit, labels_of, Trainable};
use crate::sampler::SplitAssignment;
use crate::tensor::{LayerNormAffine, Linear, Mode, ParamStore, SparseMatrix, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Transaction features and labels with no link information.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub ids: Vec<NodeId>,
    /// `ids.len() × dim`, row-major.
    pub data: Vec<f64>,
    pub labels: Vec<Label>,
    rows: HashMap<NodeId, usize>,
}

impl FeatureTable {
    pub fn from_graph(g: &HeteroGraph) -> Result<Self> {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for v in g.txn_nodes() {
            let node = g.node(v);
            let f = node.features.as_ref().ok_or_else(|| invalid(format!("transaction {} has no features", node.name)))?;
            let y = node.label.ok_or_else(|| invalid(format!("transaction {} has no label", node.name)))?;
            ids.push(v);
            data.extend_from_slice(f);
            labels.push(y);
        }
        Ok(Self::new(g.feature_dim(), ids, data, labels))
    }

    pub fn new(dim: usize, ids: Vec<NodeId>, data: Vec<f64>, labels: Vec<Label>) -> Self {
        let rows = ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        Self { dim, ids, data, labels, rows }
    }

    fn rows_of(&self, ids: &[NodeId]) -> Result<Vec<usize>> {
        ids.iter().map(|v| self.rows.get(v).copied().ok_or_else(|| invalid(format!("no features for node {v}")))).collect()
    }

    fn gather(&self, rows: &[usize]) -> Vec<f64> {
        rows.iter().flat_map(|&r| self.data[r * self.dim..(r + 1) * self.dim].iter().copied()).collect()
    }

    pub fn labels_of(&self, ids: &[NodeId]) -> Result<Vec<Label>> {
        Ok(self.rows_of(ids)?.into_iter().map(|r| self.labels[r]).collect())
    }
}

/// Output of a baseline run: fraud probabilities for the test partition.
#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub test_ids: Vec<NodeId>,
    pub test_scores: Vec<f64>,
    pub report: TrainReport,
}

/// Logistic regression (`hidden = None`) or a one-hidden-layer ReLU network.
#[derive(Debug, Clone)]
pub struct Mlp {
    store: ParamStore,
    first: Linear,
    second: Option<Linear>,
    dropout: f64,
}

impl Mlp {
    pub fn new(input: usize, hidden: Option<usize>, dropout: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (first, second) = match hidden {
            None => (Linear::new(&mut store, "lr", input, 2, &mut rng), None),
            Some(h) => {
                let a = Linear::new(&mut store, "mlp.hidden", input, h, &mut rng);
                let b = Linear::new(&mut store, "mlp.out", h, 2, &mut rng);
                (a, Some(b))
            }
        };
        Self { store, first, second, dropout }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, tape: &mut Tape, x: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        let z = self.first.forward(tape, &self.store, x)?;
        let logits = match &self.second {
            None => z,
            Some(out) => {
                let z = tape.relu(z);
                let z = tape.dropout(z, self.dropout, mode, rng)?;
                out.forward(tape, &self.store, z)?
            }
        };
        tape.softmax(logits, 1)
    }

    pub fn predict(&self, table: &FeatureTable, ids: &[NodeId]) -> Result<Vec<f64>> {
        let rows = table.rows_of(ids)?;
        let mut tape = Tape::with_frozen_params();
        let x = tape.constant(vec![rows.len(), table.dim], table.gather(&rows))?;
        let p = self.forward(&mut tape, x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(tape.value(p).chunks(2).map(|c| c[1]).collect())
    }
}

struct MlpTask<'a> {
    model: Mlp,
    table: &'a FeatureTable,
    class_weights: Option<[f64; 2]>,
}

impl Trainable for MlpTask<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn batch_loss(&self, tape: &mut Tape, seeds: &[NodeId], rng: &mut ChaCha8Rng) -> Result<Var> {
        let rows = self.table.rows_of(seeds)?;
        let x = tape.constant(vec![rows.len(), self.table.dim], self.table.gather(&rows))?;
        let p = self.model.forward(tape, x, Mode::Train, rng)?;
        let labels: Vec<Label> = rows.iter().map(|&r| self.table.labels[r]).collect();
        nll_loss(tape, p, &labels, self.class_weights)
    }

    fn fraud_scores(&self, ids: &[NodeId]) -> Result<Vec<f64>> {
        self.model.predict(self.table, ids)
    }
}

fn fit_mlp(table: &FeatureTable, split: &SplitAssignment, hidden: Option<usize>, dropout: f64, cfg: &TrainConfig, seed: u64) -> Result<(Mlp, BaselineRun)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Mlp::new(table.dim, hidden, dropout, seed);
    let (train_labels, val_labels) = (table.labels_of(&split.train)?, table.labels_of(&split.val)?);
    let mut task = MlpTask { model, table, class_weights: cfg.class_weights };
    let report = fit(&mut task, &split.train, &split.val, &train_labels, &val_labels, cfg, &mut rng)?;
    let test_scores = task.model.predict(table, &split.test)?;
    Ok((task.model, BaselineRun { test_ids: split.test.clone(), test_scores, report }))
}

pub fn train_lr(table: &FeatureTable, split: &SplitAssignment, cfg: &TrainConfig, seed: u64) -> Result<(Mlp, BaselineRun)> {
    fit_mlp(table, split, None, 0.0, cfg, seed)
}

/// Hidden width defaults to the predictor's head width.
pub fn train_dnn(
    table: &FeatureTable,
    split: &SplitAssignment,
    hidden: usize,
    dropout: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Mlp, BaselineRun)> {
    fit_mlp(table, split, Some(hidden), dropout, cfg, seed)
}

/// Symmetrically normalized propagation `D^-1/2 (A + I) D^-1/2` (self
/// loops first, then both directions of every edge).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    pub n: usize,
    pub matrix: Arc<SparseMatrix>,
}

impl NormalizedAdjacency {
    pub fn new(view: &HomogeneousView) -> Self {
        let n = view.num_nodes();
        let mut deg = vec![1.0f64; n];
        for &(u, v) in &view.edges {
            deg[u] += 1.0;
            deg[v] += 1.0;
        }
        let mut src = Vec::with_capacity(n + 2 * view.edges.len());
        let mut dst = Vec::with_capacity(src.capacity());
        for i in 0..n {
            src.push(i);
            dst.push(i);
        }
        for &(u, v) in &view.edges {
            src.extend([u, v]);
            dst.extend([v, u]);
        }
        let weight = src.iter().zip(&dst).map(|(&s, &d)| 1.0 / (deg[s] * deg[d]).sqrt()).collect();
        let matrix = SparseMatrix::new(n, n, dst, src, weight).expect("view edges index view nodes");
        Self { n, matrix: Arc::new(matrix) }
    }

    fn apply(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        tape.spmm(&self.matrix, h)
    }
}

/// Two graph-convolution layers over transactions followed by the same
/// scoring head as the heterogeneous predictor.
#[derive(Debug, Clone)]
pub struct Gcn {
    store: ParamStore,
    layers: Vec<Linear>,
    ff: Linear,
    norm: LayerNormAffine,
    out: Linear,
    dropout: f64,
    feature_dim: usize,
}

impl Gcn {
    pub fn new(feature_dim: usize, cfg: &PredictorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.n_hid;
        let layers = (0..cfg.n_layers)
            .map(|l| Linear::new(&mut store, &format!("gcn{l}"), if l == 0 { feature_dim } else { d }, d, &mut rng))
            .collect();
        let ff = Linear::new(&mut store, "head.ff", d + feature_dim, cfg.n_ff, &mut rng);
        let norm = LayerNormAffine::new(&mut store, "head.norm", cfg.n_ff);
        let out = Linear::new(&mut store, "head.out", cfg.n_ff, 2, &mut rng);
        Ok(Self { store, layers, ff, norm, out, dropout: cfg.dropout, feature_dim })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Node representations after every convolution, `[n, n_hid]`.
    pub fn encode(&self, tape: &mut Tape, adj: &NormalizedAdjacency, x: Var) -> Result<Var> {
        let mut h = x;
        for lin in &self.layers {
            let w = tape.param(&self.store, lin.weight);
            let b = tape.param(&self.store, lin.bias);
            let hw = tape.matmul(h, w)?;
            let agg = adj.apply(tape, hw)?;
            let z = tape.add(agg, b)?;
            h = tape.relu(z);
        }
        Ok(h)
    }

    /// Class probabilities for local rows `targets`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        adj: &NormalizedAdjacency,
        x: Var,
        targets: &[usize],
        mode: Mode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let h = self.encode(tape, adj, x)?;
        let ht = tape.gather_rows(h, targets)?;
        let ht = tape.tanh(ht);
        let xt = tape.gather_rows(x, targets)?;
        let z = tape.concat_cols(&[ht, xt])?;
        let z = self.ff.forward(tape, &self.store, z)?;
        let z = tape.dropout(z, self.dropout, mode, rng)?;
        let z = self.norm.forward(tape, &self.store, z)?;
        let z = tape.relu(z);
        let logits = self.out.forward(tape, &self.store, z)?;
        tape.softmax(logits, 1)
    }
}

/// Transaction-only graph inputs for the convolution baseline.
#[derive(Debug, Clone)]
pub struct GcnInputs {
    pub adj: NormalizedAdjacency,
    /// `n × F` features in view order.
    pub features: Vec<f64>,
    pub feature_dim: usize,
    pub labels: Vec<Label>,
    local: HashMap<NodeId, usize>,
}

impl GcnInputs {
    pub fn new(g: &HeteroGraph, view: &HomogeneousView) -> Result<Self> {
        let table = FeatureTable::from_graph(g)?;
        let rows = table.rows_of(&view.txns)?;
        let local = view.txns.iter().enumerate().map(|(i, &v)| (v, i)).collect();
        Ok(Self {
            adj: NormalizedAdjacency::new(view),
            features: table.gather(&rows),
            feature_dim: table.dim,
            labels: rows.iter().map(|&r| table.labels[r]).collect(),
            local,
        })
    }

    fn locals(&self, ids: &[NodeId]) -> Result<Vec<usize>> {
        ids.iter().map(|v| self.local.get(v).copied().ok_or_else(|| invalid(format!("node {v} is not a transaction")))).collect()
    }

    pub fn predict(&self, model: &Gcn, ids: &[NodeId]) -> Result<Vec<f64>> {
        let targets = self.locals(ids)?;
        let mut tape = Tape::with_frozen_params();
        let x = tape.constant(vec![self.adj.n, self.feature_dim], self.features.clone())?;
        let p = model.forward(&mut tape, &self.adj, x, &targets, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(tape.value(p).chunks(2).map(|c| c[1]).collect())
    }
}

struct GcnTask<'a> {
    model: Gcn,
    inputs: &'a GcnInputs,
    class_weights: Option<[f64; 2]>,
}

impl Trainable for GcnTask<'_> {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn batch_loss(&self, tape: &mut Tape, seeds: &[NodeId], rng: &mut ChaCha8Rng) -> Result<Var> {
        let targets = self.inputs.locals(seeds)?;
        let x = tape.constant(vec![self.inputs.adj.n, self.inputs.feature_dim], self.inputs.features.clone())?;
        let p = self.model.forward(tape, &self.inputs.adj, x, &targets, Mode::Train, rng)?;
        let labels: Vec<Label> = targets.iter().map(|&t| self.inputs.labels[t]).collect();
        nll_loss(tape, p, &labels, self.class_weights)
    }

    fn fraud_scores(&self, ids: &[NodeId]) -> Result<Vec<f64>> {
        self.inputs.predict(&self.model, ids)
    }
}

/// Trains the convolution baseline. Every step propagates over the whole
/// transaction graph; `cfg.n_batch` only controls how many training labels
/// each step's loss covers.
pub fn train_gcn_homogeneous(
    g: &HeteroGraph,
    inputs: &GcnInputs,
    split: &SplitAssignment,
    model_cfg: &PredictorConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Gcn, BaselineRun)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Gcn::new(inputs.feature_dim, model_cfg, seed)?;
    if model.feature_dim != g.feature_dim() {
        return Err(invalid("graph and inputs disagree on feature width"));
    }
    let (train_labels, val_labels) = (labels_of(g, &split.train)?, labels_of(g, &split.val)?);
    let mut task = GcnTask { model, inputs, class_weights: cfg.class_weights };
    let report = fit(&mut task, &split.train, &split.val, &train_labels, &val_labels, cfg, &mut rng)?;
    let test_scores = inputs.predict(&task.model, &split.test)?;
    Ok((task.model, BaselineRun { test_ids: split.test.clone(), test_scores, report }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::{build_graph, build_homogeneous_view, TransactionRecord};

    #[test]
    fn normalized_adjacency_weights() {
        let view = HomogeneousView { txns: vec![10, 11, 12], edges: vec![(0, 1)] };
        let a = NormalizedAdjacency::new(&view);
        let m = &a.matrix;
        assert_eq!(m.nnz(), 5);
        // self loop of an isolated node keeps weight 1; linked pair gets 1/2
        assert_eq!(m.weight[2], 1.0);
        assert!((m.weight[3] - 0.5).abs() < 1e-15);
        assert!((m.weight[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn lr_separates_separable_features() {
        let mut ids = Vec::new();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..200 {
            let fraud = i % 5 == 0;
            ids.push(i);
            data.extend([if fraud { 2.0 } else { -2.0 } + (i as f64 * 0.37).sin() * 0.5, (i as f64).cos()]);
            labels.push(if fraud { Label::Fraud } else { Label::Legit });
        }
        let table = FeatureTable::new(2, ids.clone(), data, labels.clone());
        let split = SplitAssignment { train: ids[..140].to_vec(), val: ids[140..160].to_vec(), test: ids[160..].to_vec() };
        let cfg = TrainConfig { max_epochs: 10, optimizer: crate::tensor::AdamWConfig { lr: 0.05, ..Default::default() }, ..TrainConfig::desk() };
        let (_, run) = train_lr(&table, &split, &cfg, 1).unwrap();
        let truth: Vec<bool> = labels[160..].iter().map(|l| l.is_fraud()).collect();
        assert_eq!(crate::metrics::auc(&run.test_scores, &truth).unwrap(), 1.0);
    }

    #[test]
    fn gcn_inputs_follow_view_order() {
        let rec = |id: &str, pmt: &str, fraud: bool| TransactionRecord {
            txn_id: id.into(),
            timestamp: 0,
            buyer_id: String::new(),
            pmt_id: pmt.into(),
            email_id: String::new(),
            addr_id: String::new(),
            label: if fraud { Label::Fraud } else { Label::Legit },
            features: vec![id.len() as f64],
        };
        let g = build_graph(&[rec("a", "p", false), rec("bb", "p", true)]).unwrap();
        let inputs = GcnInputs::new(&g, &build_homogeneous_view(&g)).unwrap();
        assert_eq!(inputs.features, vec![1.0, 2.0]);
        assert_eq!(inputs.labels, vec![Label::Legit, Label::Fraud]);
        let model = Gcn::new(1, &PredictorConfig { n_hid: 4, n_layers: 2, n_heads: 1, dropout: 0.0, n_ff: 3, residual: true }, 0).unwrap();
        let p = inputs.predict(&model, &[1, 0]).unwrap();
        assert!(p.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
