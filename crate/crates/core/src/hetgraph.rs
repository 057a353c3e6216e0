//! Typed transaction graph: one node per transaction, one node per distinct
//! linkage entity, and one edge per (transaction, entity) usage.
//!
//! Edges are stored once (transaction endpoint first) and indexed in both
//! directions through a compressed adjacency. Node ids are canonical:
//! transactions in insertion order, then entities grouped by type.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};

pub type NodeId = usize;
pub type EdgeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Txn,
    Pmt,
    Email,
    Addr,
    Buyer,
}

impl NodeType {
    pub const ALL: [NodeType; 5] = [NodeType::Txn, NodeType::Pmt, NodeType::Email, NodeType::Addr, NodeType::Buyer];
    pub const ENTITIES: [NodeType; 4] = [NodeType::Pmt, NodeType::Email, NodeType::Addr, NodeType::Buyer];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Txn => "txn",
            NodeType::Pmt => "pmt",
            NodeType::Email => "email",
            NodeType::Addr => "addr",
            NodeType::Buyer => "buyer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// The edge type linking a transaction to an entity of this type.
    pub fn edge_type(self) -> Option<EdgeType> {
        match self {
            NodeType::Txn => None,
            NodeType::Pmt => Some(EdgeType::TxnPmt),
            NodeType::Email => Some(EdgeType::TxnEmail),
            NodeType::Addr => Some(EdgeType::TxnAddr),
            NodeType::Buyer => Some(EdgeType::TxnBuyer),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EdgeType {
    #[serde(rename = "txn-pmt")]
    TxnPmt,
    #[serde(rename = "txn-email")]
    TxnEmail,
    #[serde(rename = "txn-addr")]
    TxnAddr,
    #[serde(rename = "txn-buyer")]
    TxnBuyer,
}

impl EdgeType {
    pub const ALL: [EdgeType; 4] = [EdgeType::TxnPmt, EdgeType::TxnEmail, EdgeType::TxnAddr, EdgeType::TxnBuyer];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn entity_type(self) -> NodeType {
        match self {
            EdgeType::TxnPmt => NodeType::Pmt,
            EdgeType::TxnEmail => NodeType::Email,
            EdgeType::TxnAddr => NodeType::Addr,
            EdgeType::TxnBuyer => NodeType::Buyer,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EdgeType::TxnPmt => "txn-pmt",
            EdgeType::TxnEmail => "txn-email",
            EdgeType::TxnAddr => "txn-addr",
            EdgeType::TxnBuyer => "txn-buyer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Legit,
    Fraud,
}

impl Label {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Label::Legit),
            1 => Some(Label::Fraud),
            _ => None,
        }
    }

    pub fn as_u8(self) -> u8 {
        self as u8
    }

    pub fn is_fraud(self) -> bool {
        self == Label::Fraud
    }
}

/// One row of a transaction log. Empty entity ids mean the field is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct TransactionRecord {
    pub txn_id: String,
    pub timestamp: i64,
    pub buyer_id: String,
    pub pmt_id: String,
    pub email_id: String,
    pub addr_id: String,
    pub label: Label,
    pub features: Vec<f64>,
}

impl TransactionRecord {
    pub fn entity_id(&self, t: NodeType) -> &str {
        match t {
            NodeType::Txn => &self.txn_id,
            NodeType::Pmt => &self.pmt_id,
            NodeType::Email => &self.email_id,
            NodeType::Addr => &self.addr_id,
            NodeType::Buyer => &self.buyer_id,
        }
    }
}

/// Node name of an entity: `"<type>:<id>"`.
pub fn entity_key(t: NodeType, id: &str) -> String {
    format!("{}:{}", t.as_str(), id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub ntype: NodeType,
    pub features: Option<Vec<f64>>,
    pub label: Option<Label>,
    pub timestamp: Option<i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub txn: NodeId,
    pub entity: NodeId,
    pub etype: EdgeType,
}

impl Edge {
    /// The endpoint opposite `v`.
    pub fn other(&self, v: NodeId) -> NodeId {
        if v == self.txn {
            self.entity
        } else {
            self.txn
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Neighbor {
    pub node: NodeId,
    pub etype: EdgeType,
    pub edge: EdgeId,
}

#[derive(Debug, Clone)]
pub struct HeteroGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    feature_dim: usize,
    offsets: Vec<usize>,
    adj_nodes: Vec<NodeId>,
    adj_edges: Vec<EdgeId>,
    by_name: HashMap<String, NodeId>,
}

impl PartialEq for HeteroGraph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.edges == other.edges && self.feature_dim == other.feature_dim
    }
}

impl HeteroGraph {
    /// Validates and indexes a node table and edge list.
    pub fn from_parts(nodes: Vec<Node>, edges: Vec<Edge>, feature_dim: usize) -> Result<Self> {
        let mut by_name = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if by_name.insert(n.name.clone(), i).is_some() {
                return Err(invalid(format!("duplicate node name {}", n.name)));
            }
            let is_txn = n.ntype == NodeType::Txn;
            if !is_txn && (n.features.is_some() || n.label.is_some() || n.timestamp.is_some()) {
                return Err(invalid(format!("entity node {} carries transaction attributes", n.name)));
            }
            if let Some(f) = &n.features {
                if f.len() != feature_dim {
                    return Err(Error::FeatureWidth { expected: feature_dim, got: f.len() });
                }
            }
        }
        let mut seen = HashSet::with_capacity(edges.len());
        for e in &edges {
            let (t, x) = (e.txn, e.entity);
            if t >= nodes.len() || x >= nodes.len() {
                return Err(invalid(format!("edge endpoint out of range: ({t}, {x})")));
            }
            if t == x {
                return Err(invalid(format!("self-loop on node {t}")));
            }
            if nodes[t].ntype != NodeType::Txn || nodes[x].ntype != e.etype.entity_type() {
                return Err(invalid(format!(
                    "edge type {} inconsistent with endpoints {} and {}",
                    e.etype.as_str(),
                    nodes[t].name,
                    nodes[x].name
                )));
            }
            if !seen.insert((t, x)) {
                return Err(invalid(format!("duplicate edge {} - {}", nodes[t].name, nodes[x].name)));
            }
        }
        let n = nodes.len();
        let mut incident: Vec<Vec<(NodeId, EdgeId)>> = vec![Vec::new(); n];
        for (id, e) in edges.iter().enumerate() {
            incident[e.txn].push((e.entity, id));
            incident[e.entity].push((e.txn, id));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut adj_nodes = Vec::with_capacity(2 * edges.len());
        let mut adj_edges = Vec::with_capacity(2 * edges.len());
        offsets.push(0);
        for mut list in incident {
            list.sort_unstable();
            for (v, e) in list {
                adj_nodes.push(v);
                adj_edges.push(e);
            }
            offsets.push(adj_nodes.len());
        }
        Ok(Self { nodes, edges, feature_dim, offsets, adj_nodes, adj_edges, by_name })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn node(&self, v: NodeId) -> &Node {
        &self.nodes[v]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edge(&self, e: EdgeId) -> &Edge {
        &self.edges[e]
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_type(&self, v: NodeId) -> NodeType {
        self.nodes[v].ntype
    }

    pub fn node_id(&self, name: &str) -> Option<NodeId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<NodeId> {
        self.node_id(name).ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn contains(&self, v: NodeId) -> bool {
        v < self.nodes.len()
    }

    pub fn degree(&self, v: NodeId) -> usize {
        self.offsets[v + 1] - self.offsets[v]
    }

    /// Neighbor ids and incident edge ids of `v`, ascending by neighbor id.
    pub fn adjacency(&self, v: NodeId) -> (&[NodeId], &[EdgeId]) {
        let (a, b) = (self.offsets[v], self.offsets[v + 1]);
        (&self.adj_nodes[a..b], &self.adj_edges[a..b])
    }

    pub fn neighbors(&self, v: NodeId) -> Result<Vec<Neighbor>> {
        if !self.contains(v) {
            return Err(Error::UnknownNode(v.to_string()));
        }
        let (ns, es) = self.adjacency(v);
        Ok(ns.iter().zip(es).map(|(&node, &edge)| Neighbor { node, etype: self.edges[edge].etype, edge }).collect())
    }

    pub fn txn_nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.nodes.len()).filter(|&v| self.nodes[v].ntype == NodeType::Txn)
    }

    pub fn features(&self, v: NodeId) -> Option<&[f64]> {
        self.nodes[v].features.as_deref()
    }

    pub fn label(&self, v: NodeId) -> Option<Label> {
        self.nodes[v].label
    }

    /// Node counts per [`NodeType`], indexed by [`NodeType::index`].
    pub fn type_counts(&self) -> [usize; NodeType::COUNT] {
        let mut counts = [0; NodeType::COUNT];
        for n in &self.nodes {
            counts[n.ntype.index()] += 1;
        }
        counts
    }

    /// Drops entity nodes whose degree is below `min_txn_count`, together with
    /// their edges. Transactions are always kept; relative order is preserved.
    pub fn filter_low_degree(&self, min_txn_count: usize) -> Result<HeteroGraph> {
        if min_txn_count == 0 {
            return Err(invalid("min_txn_count must be at least 1"));
        }
        let keep: Vec<bool> =
            (0..self.nodes.len()).map(|v| self.nodes[v].ntype == NodeType::Txn || self.degree(v) >= min_txn_count).collect();
        let mut remap = vec![usize::MAX; self.nodes.len()];
        let mut nodes = Vec::new();
        for (v, n) in self.nodes.iter().enumerate() {
            if keep[v] {
                remap[v] = nodes.len();
                nodes.push(n.clone());
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|e| keep[e.entity])
            .map(|e| Edge { txn: remap[e.txn], entity: remap[e.entity], etype: e.etype })
            .collect();
        HeteroGraph::from_parts(nodes, edges, self.feature_dim)
    }

    /// Writes one node object per line, then one edge object per line.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for n in &self.nodes {
            let line = NodeLine {
                id: n.name.clone(),
                ntype: n.ntype,
                feat: n.features.clone(),
                label: n.label.map(Label::as_u8),
                ts: n.timestamp,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        for e in &self.edges {
            let line = EdgeLine {
                src: self.nodes[e.txn].name.clone(),
                dst: self.nodes[e.entity].name.clone(),
                etype: e.etype,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<HeteroGraph> {
        let mut nodes: Vec<Node> = Vec::new();
        let mut edges = Vec::new();
        let mut by_name: HashMap<String, NodeId> = HashMap::new();
        let mut feature_dim = None;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parse = |e: serde_json::Error| Error::Parse { line: i + 1, msg: e.to_string() };
            let value: serde_json::Value = serde_json::from_str(&line).map_err(parse)?;
            if value.get("src").is_some() {
                let e: EdgeLine = serde_json::from_value(value).map_err(parse)?;
                let lookup = |name: &str| {
                    by_name.get(name).copied().ok_or_else(|| Error::Parse { line: i + 1, msg: format!("unknown node {name}") })
                };
                edges.push(Edge { txn: lookup(&e.src)?, entity: lookup(&e.dst)?, etype: e.etype });
            } else {
                if !edges.is_empty() {
                    return Err(Error::Parse { line: i + 1, msg: "node line after edge lines".into() });
                }
                let n: NodeLine = serde_json::from_value(value).map_err(parse)?;
                if let (Some(f), None) = (&n.feat, feature_dim) {
                    feature_dim = Some(f.len());
                }
                let label = match n.label {
                    None => None,
                    Some(v) => Some(Label::from_u8(v).ok_or_else(|| Error::Parse { line: i + 1, msg: format!("label {v}") })?),
                };
                by_name.insert(n.id.clone(), nodes.len());
                nodes.push(Node { name: n.id, ntype: n.ntype, features: n.feat, label, timestamp: n.ts });
            }
        }
        HeteroGraph::from_parts(nodes, edges, feature_dim.unwrap_or(0))
    }
}

#[derive(Serialize, Deserialize)]
struct NodeLine {
    id: String,
    #[serde(rename = "type")]
    ntype: NodeType,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    feat: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    ts: Option<i64>,
}

#[derive(Serialize, Deserialize)]
struct EdgeLine {
    src: String,
    dst: String,
    etype: EdgeType,
}

/// Builds the typed graph from a transaction log.
pub fn build_graph(records: &[TransactionRecord]) -> Result<HeteroGraph> {
    let feature_dim = records.first().map_or(0, |r| r.features.len());
    let mut seen = HashSet::with_capacity(records.len());
    let mut nodes = Vec::with_capacity(records.len());
    for r in records {
        if !seen.insert(r.txn_id.as_str()) {
            return Err(Error::DuplicateTransaction(r.txn_id.clone()));
        }
        if r.features.len() != feature_dim {
            return Err(Error::FeatureWidth { expected: feature_dim, got: r.features.len() });
        }
        nodes.push(Node {
            name: r.txn_id.clone(),
            ntype: NodeType::Txn,
            features: Some(r.features.clone()),
            label: Some(r.label),
            timestamp: Some(r.timestamp),
        });
    }
    let mut entity_ids: HashMap<String, NodeId> = HashMap::new();
    for t in NodeType::ENTITIES {
        for r in records {
            let id = r.entity_id(t);
            if id.is_empty() {
                continue;
            }
            let key = entity_key(t, id);
            if !entity_ids.contains_key(&key) {
                if seen.contains(key.as_str()) {
                    return Err(invalid(format!("entity key {key} collides with a transaction id")));
                }
                entity_ids.insert(key.clone(), nodes.len());
                nodes.push(Node { name: key, ntype: t, features: None, label: None, timestamp: None });
            }
        }
    }
    let mut edges = Vec::with_capacity(records.len() * 4);
    for (txn, r) in records.iter().enumerate() {
        for t in NodeType::ENTITIES {
            let id = r.entity_id(t);
            if id.is_empty() {
                continue;
            }
            let entity = entity_ids[&entity_key(t, id)];
            edges.push(Edge { txn, entity, etype: t.edge_type().expect("entity type") });
        }
    }
    HeteroGraph::from_parts(nodes, edges, feature_dim)
}

/// Transaction-only graph: two transactions are adjacent iff they share an entity.
#[derive(Debug, Clone, PartialEq)]
pub struct HomogeneousView {
    /// Graph ids of the transactions; local index `i` refers to `txns[i]`.
    pub txns: Vec<NodeId>,
    /// Undirected local edges `(u, v)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize)>,
}

impl HomogeneousView {
    pub fn num_nodes(&self) -> usize {
        self.txns.len()
    }

    /// Local adjacency lists, ascending.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.txns.len()];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        adj.iter_mut().for_each(|a| a.sort_unstable());
        adj
    }
}

pub fn build_homogeneous_view(g: &HeteroGraph) -> HomogeneousView {
    let txns: Vec<NodeId> = g.txn_nodes().collect();
    let mut local = vec![usize::MAX; g.num_nodes()];
    for (i, &t) in txns.iter().enumerate() {
        local[t] = i;
    }
    let mut set = BTreeSet::new();
    for v in 0..g.num_nodes() {
        if g.node_type(v) == NodeType::Txn {
            continue;
        }
        let (ns, _) = g.adjacency(v);
        for (a, &x) in ns.iter().enumerate() {
            for &y in &ns[a + 1..] {
                let (u, w) = (local[x], local[y]);
                set.insert((u.min(w), u.max(w)));
            }
        }
    }
    HomogeneousView { txns, edges: set.into_iter().collect() }
}
