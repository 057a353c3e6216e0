mod common;

use common::{random_graph, random_records, rng};
use fraudgraph_core::hetgraph::{build_graph, build_homogeneous_view, entity_key, HeteroGraph, NodeType};
use fraudgraph_core::sampler::{chronological_split, khop_ball, minibatches, sample_khop, DEFAULT_RATIOS};
use proptest::prelude::*;
use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

fn check_invariants(g: &HeteroGraph) {
    let mut seen = HashSet::new();
    for e in g.edges() {
        assert_eq!(g.node_type(e.txn), NodeType::Txn);
        assert_eq!(g.node_type(e.entity), e.etype.entity_type());
        assert_ne!(e.txn, e.entity);
        assert!(seen.insert((e.txn, e.entity, e.etype)), "duplicate edge");
    }
    for v in 0..g.num_nodes() {
        let is_txn = g.node_type(v) == NodeType::Txn;
        assert_eq!(g.features(v).is_some(), is_txn);
        assert_eq!(g.label(v).is_some(), is_txn);
        assert_eq!(g.node(v).timestamp.is_some(), is_txn);
        let (ns, _) = g.adjacency(v);
        for &u in ns {
            assert!(g.adjacency(u).0.contains(&v), "adjacency not symmetric");
        }
    }
}

fn bfs_ball(g: &HeteroGraph, seeds: &[usize], k: usize) -> BTreeSet<usize> {
    let mut dist = HashMap::new();
    let mut queue = VecDeque::new();
    for &s in seeds {
        dist.insert(s, 0);
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        let d = dist[&v];
        if d == k {
            continue;
        }
        for &u in g.adjacency(v).0 {
            if let std::collections::hash_map::Entry::Vacant(e) = dist.entry(u) {
                e.insert(d + 1);
                queue.push_back(u);
            }
        }
    }
    dist.into_keys().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn construction_invariants(seed in 0u64..10_000, n in 1usize..40, pool in 1usize..12) {
        check_invariants(&random_graph(seed, n, pool, 3));
    }

    #[test]
    fn homogeneous_view_equals_two_hop_reachability(seed in 0u64..10_000, n in 1usize..15, pool in 1usize..8) {
        let g = random_graph(seed, n, pool, 2);
        prop_assume!(g.num_nodes() <= 50);
        let view = build_homogeneous_view(&g);
        let mut want = BTreeSet::new();
        for (i, &a) in view.txns.iter().enumerate() {
            for (j, &b) in view.txns.iter().enumerate() {
                if i < j && (0..g.num_nodes()).any(|x| g.adjacency(x).0.contains(&a) && g.adjacency(x).0.contains(&b)) {
                    want.insert((i, j));
                }
            }
        }
        prop_assert_eq!(view.edges.iter().copied().collect::<BTreeSet<_>>(), want);
    }

    #[test]
    fn filtering_enforces_entity_degree(seed in 0u64..10_000, n in 1usize..60, pool in 1usize..20, threshold in 1usize..5) {
        let g = random_graph(seed, n, pool, 2);
        let f = g.filter_low_degree(threshold).unwrap();
        check_invariants(&f);
        prop_assert_eq!(f.txn_nodes().count(), g.txn_nodes().count());
        for v in 0..f.num_nodes() {
            if f.node_type(v) != NodeType::Txn {
                prop_assert!(f.degree(v) >= threshold);
            }
        }
        // Every kept entity keeps all its edges.
        for v in 0..f.num_nodes() {
            if f.node_type(v) != NodeType::Txn {
                let orig = g.node_id(&f.node(v).name).unwrap();
                prop_assert_eq!(f.degree(v), g.degree(orig));
            }
        }
        if threshold == 1 {
            prop_assert_eq!(f.num_nodes(), g.num_nodes());
            prop_assert_eq!(f.num_edges(), g.num_edges());
        }
    }

    #[test]
    fn unlimited_fanout_is_the_bfs_ball(seed in 0u64..10_000, n in 1usize..50, pool in 1usize..15, k in 1usize..4) {
        let g = random_graph(seed, n, pool, 2);
        let txns: Vec<usize> = g.txn_nodes().collect();
        let seeds = vec![txns[seed as usize % txns.len()], txns[(seed as usize / 7) % txns.len()]];
        let sub = sample_khop(&g, &seeds, k, None, &mut rng(seed)).unwrap();
        let ball = khop_ball(&g, &seeds, k).unwrap();
        let want = bfs_ball(&g, &seeds, k);
        prop_assert_eq!(sub.nodes.iter().copied().collect::<BTreeSet<_>>(), want.clone());
        prop_assert_eq!(ball.nodes.iter().copied().collect::<BTreeSet<_>>(), want);
    }

    #[test]
    fn sampled_nodes_are_reachable_and_capped(seed in 0u64..10_000, n in 5usize..80, pool in 1usize..6, fanout in 1usize..4) {
        let g = random_graph(seed, n, pool, 2);
        let txns: Vec<usize> = g.txn_nodes().collect();
        let seeds = vec![txns[seed as usize % txns.len()]];
        let sub = sample_khop(&g, &seeds, 3, Some(fanout), &mut rng(seed)).unwrap();
        // Reachability within the sampled subgraph, using its own edges.
        let mut adj: HashMap<usize, Vec<usize>> = HashMap::new();
        for &e in &sub.edges {
            let edge = g.edge(e);
            adj.entry(edge.txn).or_default().push(edge.entity);
            adj.entry(edge.entity).or_default().push(edge.txn);
        }
        let mut dist: HashMap<usize, usize> = HashMap::from([(seeds[0], 0)]);
        let mut queue = VecDeque::from([seeds[0]]);
        while let Some(v) = queue.pop_front() {
            for &u in adj.get(&v).into_iter().flatten() {
                if !dist.contains_key(&u) {
                    dist.insert(u, dist[&v] + 1);
                    queue.push_back(u);
                }
            }
        }
        for (i, &v) in sub.nodes.iter().enumerate() {
            prop_assert!(dist.get(&v).is_some_and(|&d| d <= 3), "node unreachable");
            prop_assert!(sub.hops[i] <= 3);
        }
        // Nodes first reached at hop d+1 were drawn from hop-d frontiers; no
        // frontier node can have contributed more than `fanout` of them.
        for d in 0..3 {
            let frontier: Vec<usize> = sub.nodes.iter().zip(&sub.hops).filter(|(_, &h)| h == d).map(|(&v, _)| v).collect();
            let newly = sub.hops.iter().filter(|&&h| h == d + 1).count();
            prop_assert!(newly <= frontier.len() * fanout);
        }
    }

    #[test]
    fn split_respects_ratios_and_time(seed in 0u64..10_000, n in 10usize..200) {
        let mut records = random_records(seed, n, n, 2, 0.0);
        for (i, r) in records.iter_mut().enumerate() {
            // Few distinct timestamps so ties are common.
            r.timestamp = (seed as i64 * 31 + i as i64 * 17) % 13;
        }
        let g = build_graph(&records).unwrap();
        let s = chronological_split(&g, DEFAULT_RATIOS).unwrap();
        let total = s.train.len() + s.val.len() + s.test.len();
        prop_assert_eq!(total, n);
        let near = |got: usize, frac: f64| (got as f64 - frac * n as f64).abs() <= 1.0;
        prop_assert!(near(s.train.len(), 0.7) && near(s.val.len(), 0.1) && near(s.test.len(), 0.2));
        let ts = |ids: &[usize]| ids.iter().map(|&v| g.node(v).timestamp.unwrap()).collect::<Vec<_>>();
        let (tr, va, te) = (ts(&s.train), ts(&s.val), ts(&s.test));
        let max_tr = tr.iter().max().copied().unwrap_or(i64::MIN);
        let min_va = va.iter().min().copied().unwrap_or(i64::MAX);
        let min_te = te.iter().min().copied().unwrap_or(i64::MAX);
        let max_va = va.iter().max().copied().unwrap_or(i64::MIN);
        prop_assert!(max_tr <= min_va.min(min_te));
        prop_assert!(max_va <= min_te);
    }

    #[test]
    fn one_epoch_of_batches_is_the_partition(seed in 0u64..10_000, n in 1usize..150, b in 1usize..40) {
        let ids: Vec<usize> = (0..n).map(|i| i * 3 + 1).collect();
        let batches = minibatches(&ids, b, &mut rng(seed)).unwrap();
        let mut got: Vec<usize> = batches.concat();
        got.sort_unstable();
        prop_assert_eq!(got, ids);
        for (i, batch) in batches.iter().enumerate() {
            if i + 1 < batches.len() {
                prop_assert_eq!(batch.len(), b);
            } else {
                prop_assert!(!batch.is_empty() && batch.len() <= b);
            }
        }
    }

    #[test]
    fn neighbor_lists_are_mutual(seed in 0u64..10_000, n in 1usize..40, pool in 1usize..10) {
        let g = random_graph(seed, n, pool, 1);
        for v in 0..g.num_nodes() {
            for nb in g.neighbors(v).unwrap() {
                prop_assert!(g.neighbors(nb.node).unwrap().iter().any(|x| x.node == v && x.edge == nb.edge));
            }
        }
    }
}

#[test]
fn fanout_caps_each_expansion_on_a_hub() {
    // One card used by 100 transactions.
    let mut records = random_records(1, 100, 1000, 1, 1.0);
    for r in &mut records {
        r.pmt_id = "HUB".into();
    }
    let g = build_graph(&records).unwrap();
    let hub = g.node_id(&entity_key(NodeType::Pmt, "HUB")).unwrap();
    assert_eq!(g.degree(hub), 100);
    let t = g.txn_nodes().next().unwrap();
    let sub = sample_khop(&g, &[t], 2, Some(32), &mut rng(0)).unwrap();
    assert_eq!(sub.hops.iter().filter(|&&h| h == 2).count(), 32);
}

#[test]
fn histogram_matches_distinct_entities_of_generated_log() {
    let records = fraudgraph_core::datagen::generate(&fraudgraph_core::datagen::GenConfig::new(1000, 3)).unwrap().0;
    let g = build_graph(&records).unwrap();
    let counts = g.type_counts();
    assert_eq!(counts[NodeType::Txn.index()], records.len());
    for t in NodeType::ENTITIES {
        let distinct: HashSet<&str> = records.iter().map(|r| r.entity_id(t)).filter(|s| !s.is_empty()).collect();
        assert_eq!(counts[t.index()], distinct.len(), "{t:?}");
    }
    let edges: usize = records.iter().map(|r| NodeType::ENTITIES.iter().filter(|&&t| !r.entity_id(t).is_empty()).count()).sum();
    assert_eq!(g.num_edges(), edges);
}

#[test]
fn jsonl_round_trip_of_a_generated_graph() {
    let records = fraudgraph_core::datagen::generate(&fraudgraph_core::datagen::GenConfig::new(1000, 4)).unwrap().0;
    let g = build_graph(&records).unwrap();
    let mut buf = Vec::new();
    g.write_jsonl(&mut buf).unwrap();
    let back = HeteroGraph::read_jsonl(&buf[..]).unwrap();
    for (a, b) in back.nodes().iter().zip(g.nodes()) {
        assert_eq!(a, b);
    }
    assert_eq!(back.nodes(), g.nodes());
    assert_eq!(back.edges(), g.edges());
}
