//! Capped-fanout k-hop neighborhood sampling and chronological splits.

use crate::error::{invalid, Error, Result};
use crate::hetgraph::{EdgeId, HeteroGraph, NodeId, NodeType};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const DEFAULT_HOPS: usize = 3;
pub const DEFAULT_FANOUT: usize = 32;

/// Nodes reached from a set of seed transactions, with the graph edges
/// induced on them. Local index `i` refers to `nodes[i]`; seeds come first.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSubgraph {
    pub seeds: Vec<NodeId>,
    pub nodes: Vec<NodeId>,
    pub hops: Vec<usize>,
    /// Global edge ids, ascending.
    pub edges: Vec<EdgeId>,
    local: HashMap<NodeId, usize>,
}

impl SampledSubgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn local_id(&self, v: NodeId) -> Option<usize> {
        self.local.get(&v).copied()
    }

    pub fn contains(&self, v: NodeId) -> bool {
        self.local.contains_key(&v)
    }
}

/// Breadth-first expansion from `seeds` for `k` hops. Each frontier node keeps
/// `min(degree, fanout)` neighbors drawn uniformly without replacement;
/// `fanout = None` keeps all of them.
pub fn sample_khop<R: Rng + ?Sized>(
    g: &HeteroGraph,
    seeds: &[NodeId],
    k: usize,
    fanout: Option<usize>,
    rng: &mut R,
) -> Result<SampledSubgraph> {
    if fanout == Some(0) {
        return Err(invalid("fanout must be at least 1"));
    }
    expand(g, seeds, k, |deg| match fanout {
        Some(f) if f < deg => {
            let mut picked = rand::seq::index::sample(rng, deg, f).into_vec();
            picked.sort_unstable();
            Some(picked)
        }
        _ => None,
    })
}

/// The exact `k`-hop ball around `seeds`.
pub fn khop_ball(g: &HeteroGraph, seeds: &[NodeId], k: usize) -> Result<SampledSubgraph> {
    expand(g, seeds, k, |_| None)
}

fn expand(
    g: &HeteroGraph,
    seeds: &[NodeId],
    k: usize,
    mut pick: impl FnMut(usize) -> Option<Vec<usize>>,
) -> Result<SampledSubgraph> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let mut nodes = Vec::new();
    let mut hops = Vec::new();
    let mut local = HashMap::new();
    let mut unique_seeds = Vec::with_capacity(seeds.len());
    for &s in seeds {
        if !g.contains(s) {
            return Err(Error::UnknownNode(s.to_string()));
        }
        if g.node_type(s) != NodeType::Txn {
            return Err(invalid(format!("seed {} is not a transaction", g.node(s).name)));
        }
        if local.insert(s, nodes.len()).is_none() {
            nodes.push(s);
            hops.push(0);
            unique_seeds.push(s);
        }
    }
    let mut frontier = unique_seeds.clone();
    for d in 1..=k {
        let mut next = Vec::new();
        for &v in &frontier {
            let (ns, _) = g.adjacency(v);
            let mut visit = |u: NodeId| {
                if let std::collections::hash_map::Entry::Vacant(slot) = local.entry(u) {
                    slot.insert(nodes.len());
                    nodes.push(u);
                    hops.push(d);
                    next.push(u);
                }
            };
            match pick(ns.len()) {
                Some(idx) => idx.into_iter().for_each(|i| visit(ns[i])),
                None => ns.iter().for_each(|&u| visit(u)),
            }
        }
        frontier = next;
    }
    let mut edges = Vec::new();
    for &v in &nodes {
        if g.node_type(v) != NodeType::Txn {
            continue;
        }
        let (ns, es) = g.adjacency(v);
        for (u, &e) in ns.iter().zip(es) {
            if local.contains_key(u) {
                edges.push(e);
            }
        }
    }
    edges.sort_unstable();
    Ok(SampledSubgraph { seeds: unique_seeds, nodes, hops, edges, local })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl Partition {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Partition::Train),
            "val" => Some(Partition::Val),
            "test" => Some(Partition::Test),
            _ => None,
        }
    }
}

/// Transaction ids of each partition, in chronological order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub train: Vec<NodeId>,
    pub val: Vec<NodeId>,
    pub test: Vec<NodeId>,
}

impl SplitAssignment {
    pub fn part(&self, p: Partition) -> &[NodeId] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    /// Partition tag per graph node (`None` for entities).
    pub fn tags(&self, num_nodes: usize) -> Vec<Option<Partition>> {
        let mut tags = vec![None; num_nodes];
        for p in [Partition::Train, Partition::Val, Partition::Test] {
            for &v in self.part(p) {
                tags[v] = Some(p);
            }
        }
        tags
    }
}

pub const DEFAULT_RATIOS: (f64, f64, f64) = (0.7, 0.1, 0.2);

/// Sorts transactions by (timestamp, txn id) and cuts at the cumulative ratios.
pub fn chronological_split(g: &HeteroGraph, ratios: (f64, f64, f64)) -> Result<SplitAssignment> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(invalid(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let mut txns = Vec::new();
    for v in g.txn_nodes() {
        let node = g.node(v);
        let ts = node.timestamp.ok_or_else(|| invalid(format!("transaction {} has no timestamp", node.name)))?;
        txns.push((ts, node.name.as_str(), v));
    }
    txns.sort_unstable();
    let n = txns.len() as f64;
    let n_train = (a * n).round() as usize;
    let n_train_val = (((a + b) * n).round() as usize).max(n_train);
    let ids: Vec<NodeId> = txns.into_iter().map(|t| t.2).collect();
    Ok(SplitAssignment {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train_val].to_vec(),
        test: ids[n_train_val..].to_vec(),
    })
}

/// One epoch of shuffled seed batches; the last may be short.
pub fn minibatches<R: Rng + ?Sized>(ids: &[NodeId], n_batch: usize, rng: &mut R) -> Result<Vec<Vec<NodeId>>> {
    if n_batch == 0 {
        return Err(invalid("n_batch must be at least 1"));
    }
    if ids.is_empty() {
        return Err(invalid("cannot batch an empty partition"));
    }
    let mut order = ids.to_vec();
    order.shuffle(rng);
    Ok(order.chunks(n_batch).map(<[NodeId]>::to_vec).collect())
}
