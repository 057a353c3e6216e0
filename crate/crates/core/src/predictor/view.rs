use crate::error::{Error, Result};
use crate::hetgraph::{EdgeId, EdgeType, HeteroGraph, Label, NodeId, NodeType};
use crate::sampler::SampledSubgraph;

/// A node subset of a graph in the compact layout the encoder consumes.
///
/// Every undirected edge yields two messages: entries `0..E` run from the
/// transaction to the entity and entries `E..2E` run back.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphView {
    pub nodes: Vec<NodeId>,
    pub types: Vec<NodeType>,
    pub labels: Vec<Option<Label>>,
    /// Local ids of transaction nodes, ascending.
    pub txn_rows: Vec<usize>,
    pub entity_rows: Vec<usize>,
    /// Row of each local node within `txn_rows`, if it is a transaction.
    pub txn_index: Vec<Option<usize>>,
    pub feature_dim: usize,
    /// `txn_rows.len() × feature_dim`, row-major.
    pub features: Vec<f64>,
    /// `(txn local, entity local, type)` per undirected edge.
    pub edges: Vec<(usize, usize, EdgeType)>,
    pub edge_ids: Vec<EdgeId>,
    pub msg_src: Vec<usize>,
    pub msg_dst: Vec<usize>,
    pub msg_etype: Vec<usize>,
    pub msg_src_type: Vec<usize>,
    pub msg_dst_type: Vec<usize>,
    /// Undirected edge index of each message.
    pub msg_edge: Vec<usize>,
}

impl GraphView {
    pub fn full(g: &HeteroGraph) -> Result<Self> {
        let nodes: Vec<NodeId> = (0..g.num_nodes()).collect();
        let edges: Vec<EdgeId> = (0..g.num_edges()).collect();
        Self::from_parts(g, nodes, edges)
    }

    pub fn from_subgraph(g: &HeteroGraph, sub: &SampledSubgraph) -> Result<Self> {
        Self::from_parts(g, sub.nodes.clone(), sub.edges.clone())
    }

    /// `edges` must only touch `nodes`; their order fixes message order.
    pub fn from_parts(g: &HeteroGraph, nodes: Vec<NodeId>, edge_ids: Vec<EdgeId>) -> Result<Self> {
        let mut local = std::collections::HashMap::with_capacity(nodes.len());
        for (i, &v) in nodes.iter().enumerate() {
            if !g.contains(v) {
                return Err(Error::UnknownNode(v.to_string()));
            }
            local.insert(v, i);
        }
        let f = g.feature_dim();
        let types: Vec<NodeType> = nodes.iter().map(|&v| g.node_type(v)).collect();
        let labels = nodes.iter().map(|&v| g.label(v)).collect();
        let mut txn_rows = Vec::new();
        let mut entity_rows = Vec::new();
        let mut txn_index = vec![None; nodes.len()];
        let mut features = Vec::new();
        for (i, &v) in nodes.iter().enumerate() {
            if types[i] == NodeType::Txn {
                txn_index[i] = Some(txn_rows.len());
                txn_rows.push(i);
                match g.features(v) {
                    Some(x) => features.extend_from_slice(x),
                    None => features.extend(std::iter::repeat_n(0.0, f)),
                }
            } else {
                entity_rows.push(i);
            }
        }
        let mut edges = Vec::with_capacity(edge_ids.len());
        for &e in &edge_ids {
            let edge = g.edge(e);
            let lookup = |v: NodeId| local.get(&v).copied().ok_or_else(|| Error::UnknownNode(g.node(v).name.clone()));
            edges.push((lookup(edge.txn)?, lookup(edge.entity)?, edge.etype));
        }
        let e = edges.len();
        let mut msg_src = Vec::with_capacity(2 * e);
        let mut msg_dst = Vec::with_capacity(2 * e);
        let mut msg_etype = Vec::with_capacity(2 * e);
        for reverse in [false, true] {
            for &(t, x, et) in &edges {
                let (s, d) = if reverse { (x, t) } else { (t, x) };
                msg_src.push(s);
                msg_dst.push(d);
                msg_etype.push(et.index());
            }
        }
        let msg_src_type = msg_src.iter().map(|&s| types[s].index()).collect();
        let msg_dst_type = msg_dst.iter().map(|&d| types[d].index()).collect();
        let msg_edge = (0..2 * e).map(|m| m % e.max(1)).collect();
        Ok(Self {
            nodes,
            types,
            labels,
            txn_rows,
            entity_rows,
            txn_index,
            feature_dim: f,
            features,
            edges,
            edge_ids,
            msg_src,
            msg_dst,
            msg_etype,
            msg_src_type,
            msg_dst_type,
            msg_edge,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn txn_features(&self, row: usize) -> &[f64] {
        &self.features[row * self.feature_dim..(row + 1) * self.feature_dim]
    }
}
