//! Mask-optimization explanations for single transactions.
//!
//! For a target transaction the explainer learns one weight per edge of its
//! receptive field and one weight per (node, feature) pair, squashed through
//! a sigmoid, while the trained predictor stays frozen. The objective is the
//! predictor's loss on the target plus size and entropy penalties on both
//! masks.

use crate::error::{invalid, Error, Result};
use crate::hetgraph::{EdgeId, HeteroGraph, Label, NodeId, NodeType};
use crate::predictor::{nll_loss, GraphView, MaskVars, Predictor, LOG_EPS};
use crate::sampler::{khop_ball, SampledSubgraph};
use crate::tensor::{AdamW, AdamWConfig, Mode, Tape, Tensor, Var};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

pub const EXPLANATION_VERSION: u32 = 1;
pub const DEFAULT_THRESHOLD: f64 = 0.15;

/// Which class the prediction term pulls towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// The predictor's own decision for the target.
    Predicted,
    GroundTruth,
}

/// Transactions covered by the prediction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    Target,
    /// Every labeled transaction in the subgraph.
    AllLabeled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta_edge_size: f64,
    pub beta_edge_entropy: f64,
    pub beta_feature_size: f64,
    pub beta_feature_entropy: f64,
    /// Raw parameters start uniform in `±init_bound`.
    pub init_bound: f64,
    pub label_mode: LabelMode,
    pub scope: LossScope,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            beta_edge_size: 0.005,
            beta_edge_entropy: 1.0,
            beta_feature_size: 1.0,
            beta_feature_entropy: 0.1,
            init_bound: 0.1,
            label_mode: LabelMode::Predicted,
            scope: LossScope::Target,
            seed: 0,
        }
    }
}

/// The exact receptive field of an `L`-layer predictor around one target.
#[derive(Debug, Clone)]
pub struct ComputationSubgraph {
    pub target: NodeId,
    pub target_local: usize,
    pub sub: SampledSubgraph,
    pub view: GraphView,
}

impl ComputationSubgraph {
    pub fn num_edges(&self) -> usize {
        self.view.num_edges()
    }

    pub fn num_nodes(&self) -> usize {
        self.view.num_nodes()
    }

    pub fn edge_ids(&self) -> &[EdgeId] {
        &self.view.edge_ids
    }
}

pub fn extract_subgraph(g: &HeteroGraph, target: NodeId, layers: usize) -> Result<ComputationSubgraph> {
    if !g.contains(target) {
        return Err(Error::UnknownNode(target.to_string()));
    }
    let sub = khop_ball(g, &[target], layers)?;
    let view = GraphView::from_subgraph(g, &sub)?;
    let target_local = sub.local_id(target).expect("seed is in its ball");
    Ok(ComputationSubgraph { target, target_local, sub, view })
}

/// Raw (unsquashed) mask parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplainerMasks {
    /// One entry per subgraph edge, `[E]`.
    pub edges: Tensor,
    /// One row per subgraph node, `[|V|, F]`.
    pub features: Tensor,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl ExplainerMasks {
    pub fn random(cs: &ComputationSubgraph, bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let edges = Tensor::uniform(&[cs.num_edges()], bound, rng);
        let features = Tensor::uniform(&[cs.num_nodes(), cs.view.feature_dim], bound, rng);
        Self { edges, features }
    }

    pub fn edge_weights(&self) -> Vec<f64> {
        self.edges.data().iter().map(|&x| sigmoid(x)).collect()
    }

    pub fn feature_weights(&self) -> Vec<f64> {
        self.features.data().iter().map(|&x| sigmoid(x)).collect()
    }
}

/// Class probabilities `[T, 2]` for local transaction ids `targets` on a
/// tape, with squashed masks `edge_mask` `[E]` and `feature_mask` `[|V|, F]`.
pub fn masked_probs(
    model: &Predictor,
    tape: &mut Tape,
    cs: &ComputationSubgraph,
    targets: &[usize],
    edge_mask: Var,
    feature_mask: Var,
) -> Result<Var> {
    let view = &cs.view;
    let f = view.feature_dim;
    if tape.shape(edge_mask) != [view.num_edges()] || tape.shape(feature_mask) != [view.num_nodes(), f] {
        return Err(Error::ShapeMismatch {
            left: [tape.shape(edge_mask), tape.shape(feature_mask)].concat(),
            right: vec![view.num_edges(), view.num_nodes(), f],
        });
    }
    let txn_mask = tape.gather_rows(feature_mask, &view.txn_rows)?;
    let masks = MaskVars { edges: edge_mask, features: txn_mask };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let enc = model.encode(tape, view, Mode::Eval, &mut rng, Some(masks))?;
    model.head(tape, &enc, view, targets, Mode::Eval, &mut rng)
}

/// Fraud probability of the target under fixed mask values in `[0, 1]`.
pub fn masked_forward(model: &Predictor, cs: &ComputationSubgraph, edge_mask: &[f64], feature_mask: &[f64]) -> Result<f64> {
    let mut tape = Tape::with_frozen_params();
    let em = tape.constant(vec![cs.num_edges()], edge_mask.to_vec())?;
    let fm = tape.constant(vec![cs.num_nodes(), cs.view.feature_dim], feature_mask.to_vec())?;
    let p = masked_probs(model, &mut tape, cs, &[cs.target_local], em, fm)?;
    Ok(tape.value(p)[1])
}

/// Mean Bernoulli entropy of mask values.
fn mean_entropy(tape: &mut Tape, m: Var) -> Result<Var> {
    let a = tape.log(m, LOG_EPS);
    let a = tape.mul(m, a)?;
    let one_minus = tape.scale(m, -1.0);
    let one_minus = tape.shift(one_minus, 1.0);
    let b = tape.log(one_minus, LOG_EPS);
    let b = tape.mul(one_minus, b)?;
    let s = tape.add(a, b)?;
    let s = tape.scale(s, -1.0);
    tape.mean(s)
}

/// Prediction loss plus mask size and entropy penalties. Empty masks
/// contribute nothing.
pub fn explainer_loss(
    tape: &mut Tape,
    probs: Var,
    labels: &[Label],
    edge_mask: Var,
    feature_mask: Var,
    cfg: &ExplainerConfig,
) -> Result<Var> {
    let mut loss = nll_loss(tape, probs, labels, None)?;
    if !tape.value(edge_mask).is_empty() {
        let size = tape.sum(edge_mask);
        let size = tape.scale(size, cfg.beta_edge_size);
        let ent = mean_entropy(tape, edge_mask)?;
        let ent = tape.scale(ent, cfg.beta_edge_entropy);
        loss = tape.add(loss, size)?;
        loss = tape.add(loss, ent)?;
    }
    let rows = tape.shape(feature_mask)[0];
    if !tape.value(feature_mask).is_empty() {
        let size = tape.sum(feature_mask);
        let size = tape.scale(size, cfg.beta_feature_size / rows as f64);
        let ent = mean_entropy(tape, feature_mask)?;
        let ent = tape.scale(ent, cfg.beta_feature_entropy);
        loss = tape.add(loss, size)?;
        loss = tape.add(loss, ent)?;
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct ExplainResult {
    pub masks: ExplainerMasks,
    /// Loss before each update, then the loss after the last one.
    pub loss_trace: Vec<f64>,
    pub explained_label: Label,
    /// Unmasked fraud probability of the target.
    pub fraud_probability: f64,
}

fn loss_terms(
    model: &Predictor,
    cs: &ComputationSubgraph,
    masks: &ExplainerMasks,
    targets: &[usize],
    labels: &[Label],
    cfg: &ExplainerConfig,
) -> Result<(Tape, Var, Var, Var)> {
    let mut tape = Tape::with_frozen_params();
    let raw_e = tape.variable(&masks.edges);
    let raw_v = tape.variable(&masks.features);
    let me = tape.sigmoid(raw_e);
    let mv = tape.sigmoid(raw_v);
    let probs = masked_probs(model, &mut tape, cs, targets, me, mv)?;
    let loss = explainer_loss(&mut tape, probs, labels, me, mv, cfg)?;
    Ok((tape, loss, raw_e, raw_v))
}

/// Optimizes both masks with plain Adam; the predictor is only read.
pub fn optimize_masks(model: &Predictor, g: &HeteroGraph, cs: &ComputationSubgraph, cfg: &ExplainerConfig) -> Result<ExplainResult> {
    let fraud_probability = model.predict_view(g, &cs.view, &[cs.target_local])?[0].fraud_probability;
    let (targets, labels): (Vec<usize>, Vec<Label>) = match cfg.scope {
        LossScope::Target => {
            let label = match cfg.label_mode {
                LabelMode::Predicted => {
                    if fraud_probability > 0.5 {
                        Label::Fraud
                    } else {
                        Label::Legit
                    }
                }
                LabelMode::GroundTruth => g.label(cs.target).ok_or_else(|| invalid("target has no label"))?,
            };
            (vec![cs.target_local], vec![label])
        }
        LossScope::AllLabeled => {
            let rows: Vec<usize> = cs.view.txn_rows.iter().copied().filter(|&r| cs.view.labels[r].is_some()).collect();
            let labels = match cfg.label_mode {
                LabelMode::GroundTruth => rows.iter().map(|&r| cs.view.labels[r].expect("filtered")).collect(),
                LabelMode::Predicted => model
                    .predict_view(g, &cs.view, &rows)?
                    .into_iter()
                    .map(|s| s.label)
                    .collect(),
            };
            (rows, labels)
        }
    };
    let explained_label = labels[targets.iter().position(|&t| t == cs.target_local).unwrap_or(0)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut masks = ExplainerMasks::random(cs, cfg.init_bound, &mut rng);
    let mut opt = AdamW::new(AdamWConfig::adam(cfg.lr));
    let mut loss_trace = Vec::with_capacity(cfg.epochs + 1);
    for epoch in 0..=cfg.epochs {
        let (tape, loss, raw_e, raw_v) = loss_terms(model, cs, &masks, &targets, &labels, cfg)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Diverged { epoch, step: 0, loss: value });
        }
        loss_trace.push(value);
        if epoch == cfg.epochs {
            break;
        }
        let grads = tape.backward(loss)?;
        let ge = grads.get(raw_e).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; masks.edges.numel()]);
        let gv = grads.get(raw_v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; masks.features.numel()]);
        let mut params = [masks.edges, masks.features];
        opt.update(&mut params, &[ge, gv])?;
        let [e, v] = params;
        masks = ExplainerMasks { edges: e, features: v };
    }
    Ok(ExplainResult { masks, loss_trace, explained_label, fraud_probability })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationNode {
    pub id: String,
    #[serde(rename = "type")]
    pub ntype: NodeType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<u8>,
    pub feat_importance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationEdge {
    pub src: String,
    pub dst: String,
    pub etype: crate::hetgraph::EdgeType,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub v: u32,
    pub target: String,
    pub nodes: Vec<ExplanationNode>,
    pub edges: Vec<ExplanationEdge>,
    pub threshold: f64,
}

pub fn export_explanation(g: &HeteroGraph, cs: &ComputationSubgraph, masks: &ExplainerMasks, threshold: f64) -> Explanation {
    let f = cs.view.feature_dim;
    let fw = masks.feature_weights();
    let nodes = cs
        .view
        .nodes
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let node = g.node(v);
            ExplanationNode {
                id: node.name.clone(),
                ntype: node.ntype,
                label: node.label.map(Label::as_u8),
                feat_importance: fw[i * f..(i + 1) * f].to_vec(),
            }
        })
        .collect();
    let edges = masks
        .edge_weights()
        .into_iter()
        .zip(&cs.view.edge_ids)
        .filter(|(w, _)| *w >= threshold)
        .map(|(weight, &e)| {
            let edge = g.edge(e);
            ExplanationEdge {
                src: g.node(edge.txn).name.clone(),
                dst: g.node(edge.entity).name.clone(),
                etype: edge.etype,
                weight,
            }
        })
        .collect();
    Explanation { v: EXPLANATION_VERSION, target: g.node(cs.target).name.clone(), nodes, edges, threshold }
}

fn dot_shape(t: NodeType) -> &'static str {
    match t {
        NodeType::Txn => "box",
        NodeType::Pmt => "diamond",
        NodeType::Email => "ellipse",
        NodeType::Addr => "house",
        NodeType::Buyer => "circle",
    }
}

/// Edge pen width at this weight.
pub fn penwidth(weight: f64) -> f64 {
    0.5 + 4.5 * weight
}

impl Explanation {
    /// Keeps only edges at or above `threshold`.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let edges = self.edges.iter().filter(|e| e.weight >= threshold).cloned().collect();
        Self { edges, threshold, ..self.clone() }
    }

    pub fn to_dot(&self) -> String {
        let mut out = String::from("graph explanation {\n");
        for n in &self.nodes {
            let mut attrs = format!("shape={}", dot_shape(n.ntype));
            if n.label == Some(1) {
                attrs.push_str(", style=filled, fillcolor=\"#e45756\"");
            }
            if n.id == self.target {
                attrs.push_str(", penwidth=3");
            }
            let _ = writeln!(out, "  \"{}\" [{}];", n.id, attrs);
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  \"{}\" -- \"{}\" [etype=\"{}\", weight={}, penwidth={:.3}];",
                e.src,
                e.dst,
                e.etype.as_str(),
                e.weight,
                penwidth(e.weight)
            );
        }
        out.push_str("}\n");
        out
    }
}

/// Reads back `(src, dst, weight)` for every edge statement of a DOT
/// document written by [`Explanation::to_dot`].
pub fn parse_dot_edges(dot: &str) -> Result<Vec<(String, String, f64)>> {
    let mut edges = Vec::new();
    for (i, line) in dot.lines().enumerate() {
        let line = line.trim();
        if !line.contains(" -- ") {
            continue;
        }
        let bad = |msg: &str| Error::Parse { line: i + 1, msg: msg.to_string() };
        let quoted: Vec<&str> = line.split('"').collect();
        if quoted.len() < 5 {
            return Err(bad("expected two quoted node ids"));
        }
        let weight = line
            .split(|c| c == '[' || c == ',' || c == ']')
            .map(str::trim)
            .find_map(|attr| attr.strip_prefix("weight="))
            .ok_or_else(|| bad("missing weight attribute"))?
            .parse::<f64>()
            .map_err(|e| bad(&e.to_string()))?;
        edges.push((quoted[1].to_string(), quoted[3].to_string(), weight));
    }
    Ok(edges)
}

/// Fraction of the `k` highest-weighted edges that are in `relevant`; ties
/// are broken by edge order.
pub fn precision_at_k(weights: &[f64], edges: &[EdgeId], relevant: &HashSet<EdgeId>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| weights[b].total_cmp(&weights[a]));
    let hits = order.iter().take(k).filter(|&&i| relevant.contains(&edges[i])).count();
    hits as f64 / k as f64
}

/// Principal-component projection of feature rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each component (sample, `n-1` denominator).
    pub explained_variance: [f64; 2],
    pub components: [Vec<f64>; 2],
}

/// Projects rows onto their top two principal components. Each component's
/// largest-magnitude loading is made positive.
pub fn project_features_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    if n < 2 {
        return Err(invalid("projection needs at least 2 rows"));
    }
    let f = rows[0].len();
    if f == 0 || rows.iter().any(|r| r.len() != f) {
        return Err(invalid("rows must share a positive width"));
    }
    let mut mean = vec![0.0; f];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, f, |i, j| rows[i][j] - mean[j]);
    let svd = centered.clone().svd(false, true);
    let vt = svd.v_t.ok_or_else(|| invalid("decomposition failed"))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut components = [vec![0.0; f], vec![0.0; f]];
    let mut explained_variance = [0.0; 2];
    for (c, &k) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = vt.row(k).iter().copied().collect();
        let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        let s = svd.singular_values[k];
        explained_variance[c] = s * s / (n - 1) as f64;
        components[c] = v;
    }
    let coords = (0..n)
        .map(|i| {
            let row = centered.row(i);
            let dot = |v: &[f64]| row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    Ok(Projection { coords, explained_variance, components })
}

/// Ground-truth ring edges of a graph as edge ids, keyed by txn name and
/// entity key.
pub fn edge_ids_of(g: &HeteroGraph, pairs: &[(String, String)]) -> HashSet<EdgeId> {
    let mut lookup: HashMap<(NodeId, NodeId), EdgeId> = HashMap::new();
    for (e, edge) in g.edges().iter().enumerate() {
        lookup.insert((edge.txn, edge.entity), e);
    }
    pairs
        .iter()
        .filter_map(|(t, x)| Some((g.node_id(t)?, g.node_id(x)?)))
        .filter_map(|k| lookup.get(&k).copied())
        .collect()
}
