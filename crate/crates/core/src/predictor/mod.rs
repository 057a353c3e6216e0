//! Heterogeneous graph attention predictor with a feed-forward scoring head.

mod checkpoint;
pub(crate) mod train;
mod view;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use train::{train, EpochLog, TrainConfig, TrainReport};
pub use view::GraphView;

use crate::error::{invalid, Error, Result};
use crate::hetgraph::{HeteroGraph, Label, NodeId, NodeType};
use crate::sampler::khop_ball;
use crate::tensor::{LayerNormAffine, Linear, Mode, ParamId, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Added inside every log-probability.
pub const LOG_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub n_hid: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    /// Width of the feed-forward layer in the scoring head.
    pub n_ff: usize,
    /// Adds the layer input to the aggregated messages before normalization.
    pub residual: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PredictorConfig {
    /// Small configuration that trains in seconds on a single core.
    pub fn desk() -> Self {
        Self { n_hid: 64, n_layers: 2, n_heads: 4, dropout: 0.2, n_ff: 400, residual: true }
    }

    /// Hyperparameters of the original large-scale setup.
    pub fn full() -> Self {
        Self { n_hid: 400, n_layers: 6, n_heads: 8, dropout: 0.2, n_ff: 400, residual: true }
    }

    pub fn head_dim(&self) -> usize {
        self.n_hid / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_hid == 0 || self.n_layers == 0 || self.n_heads == 0 || self.n_ff == 0 {
            return Err(invalid("predictor dimensions must be positive"));
        }
        if self.n_hid % self.n_heads != 0 {
            return Err(invalid(format!("n_hid {} not divisible by n_heads {}", self.n_hid, self.n_heads)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LayerParams {
    q: Linear,
    k: Linear,
    v: Linear,
    att_src: ParamId,
    att_tgt: ParamId,
    out: Linear,
    norm: LayerNormAffine,
}

#[derive(Debug, Clone)]
struct HeadParams {
    ff: Linear,
    norm: LayerNormAffine,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Ids {
    input_txn: Linear,
    input_entity: Linear,
    node_type_emb: ParamId,
    edge_type_emb: ParamId,
    layers: Vec<LayerParams>,
    head: HeadParams,
}

/// Squashed explainer masks bound on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MaskVars {
    /// One weight per undirected view edge, shape `[E]`.
    pub edges: Var,
    /// One row per view transaction (in `txn_rows` order), shape `[n_txn, F]`.
    pub features: Var,
}

/// Output of the graph encoder.
#[derive(Debug, Clone)]
pub struct Encoded {
    /// Final node representations, `[N, n_hid]`.
    pub hidden: Var,
    /// Transaction features as fed to the model (after masking), `[n_txn, F]`.
    pub features: Var,
    /// Post-softmax attention per layer, `[2E × n_heads]` row-major, in the
    /// view's message order.
    pub attention: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskScore {
    pub txn_id: String,
    pub node: NodeId,
    pub legit_probability: f64,
    pub fraud_probability: f64,
    pub label: Label,
}

#[derive(Debug, Clone)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub feature_dim: usize,
    /// Seed the parameters were initialized from.
    pub seed: u64,
    store: ParamStore,
    ids: Ids,
}

impl Predictor {
    pub fn new(config: PredictorConfig, feature_dim: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, feature_dim, seed, &mut rng)
    }

    pub fn with_rng<R: Rng + ?Sized>(config: PredictorConfig, feature_dim: usize, seed: u64, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.n_hid;
        let mut s = ParamStore::new();
        let input_txn = Linear::new(&mut s, "input.txn", feature_dim, d, rng);
        let input_entity = Linear::new(&mut s, "input.entity", NodeType::COUNT, d, rng);
        let node_type_emb = s.add("emb.node_type", Tensor::zeros(&[NodeType::COUNT, d]));
        let edge_type_emb = s.add("emb.edge_type", Tensor::zeros(&[crate::hetgraph::EdgeType::COUNT, d]));
        let dk_bound = 1.0 / (config.head_dim() as f64).sqrt();
        let layers = (0..config.n_layers)
            .map(|l| {
                let name = |p: &str| format!("layer{l}.{p}");
                LayerParams {
                    q: Linear::new(&mut s, &name("q"), d, d, rng),
                    k: Linear::new(&mut s, &name("k"), d, d, rng),
                    v: Linear::new(&mut s, &name("v"), d, d, rng),
                    att_src: s.add(name("att_src"), Tensor::uniform(&[NodeType::COUNT, d], dk_bound, rng)),
                    att_tgt: s.add(name("att_tgt"), Tensor::uniform(&[NodeType::COUNT, d], dk_bound, rng)),
                    out: Linear::new(&mut s, &name("out"), d, d, rng),
                    norm: LayerNormAffine::new(&mut s, &name("norm"), d),
                }
            })
            .collect();
        let head = HeadParams {
            ff: Linear::new(&mut s, "head.ff", d + feature_dim, config.n_ff, rng),
            norm: LayerNormAffine::new(&mut s, "head.norm", config.n_ff),
            out: Linear::new(&mut s, "head.out", config.n_ff, 2, rng),
        };
        let ids = Ids { input_txn, input_entity, node_type_emb, edge_type_emb, layers, head };
        Ok(Self { config, feature_dim, seed, store: s, ids })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Looks a parameter tensor up by name.
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.store.ids().find(|&id| self.store.name(id) == name).map(|id| self.store.get(id))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let id = self.store.ids().find(|&id| self.store.name(id) == name)?;
        Some(self.store.get_mut(id))
    }

    /// `H^0`: projected features plus type embedding for transactions,
    /// projected one-hot type plus type embedding for entities.
    pub fn input_embedding(&self, tape: &mut Tape, view: &GraphView, features: Var) -> Result<Var> {
        let n = view.num_nodes();
        let s = &self.store;
        let txn = self.ids.input_txn.forward(tape, s, features)?;
        let txn = tape.scatter_add_rows(txn, &view.txn_rows, n)?;
        let mut onehot = vec![0.0; view.entity_rows.len() * NodeType::COUNT];
        for (r, &v) in view.entity_rows.iter().enumerate() {
            onehot[r * NodeType::COUNT + view.types[v].index()] = 1.0;
        }
        let onehot = tape.constant(vec![view.entity_rows.len(), NodeType::COUNT], onehot)?;
        let ent = self.ids.input_entity.forward(tape, s, onehot)?;
        let ent = tape.scatter_add_rows(ent, &view.entity_rows, n)?;
        let h = tape.add(txn, ent)?;
        let emb = tape.param(s, self.ids.node_type_emb);
        let type_idx: Vec<usize> = view.types.iter().map(|t| t.index()).collect();
        let emb = tape.gather_rows(emb, &type_idx)?;
        tape.add(h, emb)
    }

    /// Runs all convolution layers over `view`.
    pub fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        view: &GraphView,
        mode: Mode,
        rng: &mut R,
        masks: Option<MaskVars>,
    ) -> Result<Encoded> {
        if view.feature_dim != self.feature_dim {
            return Err(Error::FeatureWidth { expected: self.feature_dim, got: view.feature_dim });
        }
        let x = tape.constant(vec![view.txn_rows.len(), self.feature_dim], view.features.clone())?;
        let (features, edge_mask) = match masks {
            Some(m) => {
                let e = view.edges.len();
                if tape.shape(m.edges) != [e] || tape.shape(m.features) != [view.txn_rows.len(), self.feature_dim] {
                    return Err(Error::ShapeMismatch {
                        left: [tape.shape(m.edges), tape.shape(m.features)].concat(),
                        right: vec![e, view.txn_rows.len(), self.feature_dim],
                    });
                }
                let col = tape.reshape(m.edges, &[e, 1])?;
                (tape.mul(x, m.features)?, Some(tape.gather_rows(col, &view.msg_edge)?))
            }
            None => (x, None),
        };
        let mut h = self.input_embedding(tape, view, features)?;
        let mut attention = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let (next, alpha) = self.layer(tape, l, h, view, mode, rng, edge_mask)?;
            h = next;
            attention.push(alpha);
        }
        Ok(Encoded { hidden: h, features, attention })
    }

    #[allow(clippy::too_many_arguments)]
    fn layer<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        l: usize,
        h: Var,
        view: &GraphView,
        mode: Mode,
        rng: &mut R,
        edge_mask: Option<Var>,
    ) -> Result<(Var, Vec<f64>)> {
        let s = &self.store;
        let p = &self.ids.layers[l];
        let (d, nh, dk) = (self.config.n_hid, self.config.n_heads, self.config.head_dim());
        let n = view.num_nodes();
        let m = view.msg_src.len();
        let (agg, alpha_values) = if m == 0 {
            (tape.constant(vec![n, d], vec![0.0; n * d])?, Vec::new())
        } else {
            let q = p.q.forward(tape, s, h)?;
            let k = p.k.forward(tape, s, h)?;
            let v = p.v.forward(tape, s, h)?;
            let att_src = tape.param(s, p.att_src);
            let att_tgt = tape.param(s, p.att_tgt);
            let mut score = tape.head_dot(k, &view.msg_src, att_src, &view.msg_src_type, nh)?;
            // The edge-type embedding enters the key and value inputs at the
            // first layer; by linearity it contributes emb·W per message.
            let phi = if l == 0 {
                let phi = tape.param(s, self.ids.edge_type_emb);
                let wk = tape.param(s, p.k.weight);
                let wv = tape.param(s, p.v.weight);
                let pk = tape.matmul(phi, wk)?;
                let extra = tape.head_dot(pk, &view.msg_etype, att_src, &view.msg_src_type, nh)?;
                score = tape.add(score, extra)?;
                Some(tape.matmul(phi, wv)?)
            } else {
                None
            };
            let qs = tape.head_dot(q, &view.msg_dst, att_tgt, &view.msg_dst_type, nh)?;
            let score = tape.add(score, qs)?;
            let score = tape.scale(score, 1.0 / (dk as f64).sqrt());
            let alpha = tape.segment_softmax(score, &view.msg_dst, n)?;
            let alpha_values = tape.value(alpha).to_vec();
            let mut alpha = tape.dropout(alpha, self.config.dropout, mode, rng)?;
            if let Some(em) = edge_mask {
                alpha = tape.mul(alpha, em)?;
            }
            let mut agg = tape.head_scatter(alpha, v, &view.msg_src, &view.msg_dst, n, nh)?;
            if let Some(pv) = phi {
                let extra = tape.head_scatter(alpha, pv, &view.msg_etype, &view.msg_dst, n, nh)?;
                agg = tape.add(agg, extra)?;
            }
            (agg, alpha_values)
        };
        let mut out = p.out.forward(tape, s, agg)?;
        if self.config.residual {
            out = tape.add(h, out)?;
        }
        let out = p.norm.forward(tape, s, out)?;
        Ok((tape.relu(out), alpha_values))
    }

    /// Class probabilities `[B, 2]` (legit, fraud) for local transaction ids.
    pub fn head<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        enc: &Encoded,
        view: &GraphView,
        targets: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let rows = targets
            .iter()
            .map(|&t| {
                view.txn_index.get(t).copied().flatten().ok_or_else(|| invalid(format!("local node {t} is not a transaction")))
            })
            .collect::<Result<Vec<_>>>()?;
        let s = &self.store;
        let p = &self.ids.head;
        let ht = tape.gather_rows(enc.hidden, targets)?;
        let ht = tape.tanh(ht);
        let xt = tape.gather_rows(enc.features, &rows)?;
        let z = tape.concat_cols(&[ht, xt])?;
        let z = p.ff.forward(tape, s, z)?;
        let z = tape.dropout(z, self.config.dropout, mode, rng)?;
        let z = p.norm.forward(tape, s, z)?;
        let z = tape.relu(z);
        let logits = p.out.forward(tape, s, z)?;
        tape.softmax(logits, 1)
    }

    /// Scores transactions on their exact receptive field, dropout off.
    pub fn predict(&self, g: &HeteroGraph, txns: &[NodeId]) -> Result<Vec<RiskScore>> {
        if txns.is_empty() {
            return Ok(Vec::new());
        }
        let ball = khop_ball(g, txns, self.config.n_layers)?;
        let view = GraphView::from_subgraph(g, &ball)?;
        let targets: Vec<usize> = txns.iter().map(|&t| ball.local_id(t).expect("seed is in its ball")).collect();
        self.predict_view(g, &view, &targets)
    }

    pub fn predict_view(&self, g: &HeteroGraph, view: &GraphView, targets: &[usize]) -> Result<Vec<RiskScore>> {
        let mut tape = Tape::with_frozen_params();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = self.encode(&mut tape, view, Mode::Eval, &mut rng, None)?;
        let probs = self.head(&mut tape, &enc, view, targets, Mode::Eval, &mut rng)?;
        let p = tape.value(probs);
        Ok(targets
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let node = view.nodes[t];
                let (legit, fraud) = (p[2 * i], p[2 * i + 1]);
                RiskScore {
                    txn_id: g.node(node).name.clone(),
                    node,
                    legit_probability: legit,
                    fraud_probability: fraud,
                    label: if fraud > legit { Label::Fraud } else { Label::Legit },
                }
            })
            .collect())
    }

    /// Fraud probability of every transaction, indexed like `g.txn_nodes()`.
    pub fn score_all(&self, g: &HeteroGraph) -> Result<Vec<f64>> {
        let txns: Vec<NodeId> = g.txn_nodes().collect();
        let view = GraphView::full(g)?;
        Ok(self.predict_view(g, &view, &txns)?.into_iter().map(|s| s.fraud_probability).collect())
    }
}

/// Mean negative log-likelihood of the true class, optionally class-weighted.
pub fn nll_loss(tape: &mut Tape, probs: Var, labels: &[Label], class_weights: Option<[f64; 2]>) -> Result<Var> {
    let b = labels.len();
    if b == 0 {
        return Err(invalid("loss over an empty batch"));
    }
    if tape.shape(probs) != [b, 2] {
        return Err(Error::ShapeMismatch { left: tape.shape(probs).to_vec(), right: vec![b, 2] });
    }
    let flat = tape.reshape(probs, &[2 * b, 1])?;
    let idx: Vec<usize> = labels.iter().enumerate().map(|(i, l)| 2 * i + l.as_u8() as usize).collect();
    let picked = tape.gather_rows(flat, &idx)?;
    let logp = tape.log(picked, LOG_EPS);
    match class_weights {
        None => {
            let m = tape.mean(logp)?;
            Ok(tape.scale(m, -1.0))
        }
        Some(w) => {
            let ws: Vec<f64> = labels.iter().map(|l| w[l.as_u8() as usize]).collect();
            let total: f64 = ws.iter().sum();
            if total <= 0.0 {
                return Err(invalid("class weights sum to zero over the batch"));
            }
            let wv = tape.constant(vec![b, 1], ws)?;
            let weighted = tape.mul(logp, wv)?;
            let s = tape.sum(weighted);
            Ok(tape.scale(s, -1.0 / total))
        }
    }
}
