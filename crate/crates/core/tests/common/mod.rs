#![allow(dead_code)]

pub mod gradcheck;

use fraudgraph_core::hetgraph::{build_graph, HeteroGraph, Label, NodeType, TransactionRecord};
use fraudgraph_core::predictor::{GraphView, Predictor, PredictorConfig};
use fraudgraph_core::sampler::sample_khop;
use fraudgraph_core::tensor::{Mode, Tape};
use fraudgraph_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Records drawing entities from small pools so transactions collide.
/// Each entity field is left empty with probability `skip`.
pub fn random_records(seed: u64, n_txn: usize, pool: usize, feature_dim: usize, skip: f64) -> Vec<TransactionRecord> {
    let mut r = rng(seed);
    (0..n_txn)
        .map(|i| {
            let mut pick = |prefix: &str| {
                if r.random::<f64>() < skip {
                    String::new()
                } else {
                    format!("{prefix}{}", r.random_range(0..pool))
                }
            };
            let buyer_id = pick("B");
            let pmt_id = pick("P");
            let email_id = pick("E");
            let addr_id = pick("A");
            TransactionRecord {
                txn_id: format!("T{i:04}"),
                timestamp: r.random_range(0..1000),
                buyer_id,
                pmt_id,
                email_id,
                addr_id,
                label: if r.random::<f64>() < 0.3 { Label::Fraud } else { Label::Legit },
                features: (0..feature_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
            }
        })
        .collect()
}

pub fn random_graph(seed: u64, n_txn: usize, pool: usize, feature_dim: usize) -> HeteroGraph {
    build_graph(&random_records(seed, n_txn, pool, feature_dim, 0.2)).unwrap()
}

/// Perturbs every parameter so zero-initialized embeddings and biases take
/// part in the checks.
pub fn jitter_params(model: &mut Predictor, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for t in model.params_mut().tensors_mut() {
        for x in t.data_mut() {
            *x += r.random_range(-scale..scale);
        }
    }
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`; zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale < 1e-14 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences of `f` with respect to every entry of `inputs`.
pub fn numeric_grad(f: &mut dyn FnMut(&[Tensor]) -> f64, inputs: &[Tensor], h: f64) -> Vec<Vec<f64>> {
    let mut work = inputs.to_vec();
    (0..inputs.len())
        .map(|i| {
            (0..inputs[i].numel())
                .map(|j| {
                    let x0 = work[i].data()[j];
                    work[i].data_mut()[j] = x0 + h;
                    let up = f(&work);
                    work[i].data_mut()[j] = x0 - h;
                    let down = f(&work);
                    work[i].data_mut()[j] = x0;
                    (up - down) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

type Mat = Vec<Vec<f64>>;

fn param_mat(model: &Predictor, name: &str) -> Mat {
    let t = model.param(name).unwrap_or_else(|| panic!("missing parameter {name}"));
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn param_vec(model: &Predictor, name: &str) -> Vec<f64> {
    model.param(name).unwrap_or_else(|| panic!("missing parameter {name}")).data().to_vec()
}

fn affine(x: &[f64], w: &Mat, b: Option<&[f64]>) -> Vec<f64> {
    let mut y = match b {
        Some(b) => b.to_vec(),
        None => vec![0.0; w[0].len()],
    };
    for (xi, row) in x.iter().zip(w) {
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) * inv * g + b).collect()
}

/// Naive dense reimplementation of the predictor over every node of `g`: a
/// node-by-node typed adjacency matrix, per-pair loops and per-head softmax.
/// Returns `(legit, fraud)` per transaction in `g.txn_nodes()` order.
pub fn dense_predict(model: &Predictor, g: &HeteroGraph) -> Vec<[f64; 2]> {
    dense_forward(model, g).0
}

/// Attention of one layer keyed by `(source, target)` graph node, one entry per head.
pub type AttentionMap = HashMap<(usize, usize), Vec<f64>>;

pub fn dense_forward(model: &Predictor, g: &HeteroGraph) -> (Vec<[f64; 2]>, Vec<AttentionMap>) {
    let cfg = &model.config;
    let (n, d, nh) = (g.num_nodes(), cfg.n_hid, cfg.n_heads);
    let dk = d / nh;
    // adj[u][v] = edge type index + 1 when u and v are linked.
    let mut adj = vec![vec![0usize; n]; n];
    for e in g.edges() {
        adj[e.txn][e.entity] = e.etype.index() + 1;
        adj[e.entity][e.txn] = e.etype.index() + 1;
    }
    let node_emb = param_mat(model, "emb.node_type");
    let edge_emb = param_mat(model, "emb.edge_type");
    let w_txn = param_mat(model, "input.txn.weight");
    let b_txn = param_vec(model, "input.txn.bias");
    let w_ent = param_mat(model, "input.entity.weight");
    let b_ent = param_vec(model, "input.entity.bias");
    let mut h: Mat = (0..n)
        .map(|v| {
            let t = g.node_type(v);
            let base = match g.features(v) {
                Some(x) if t == NodeType::Txn => affine(x, &w_txn, Some(&b_txn)),
                _ => {
                    let mut onehot = vec![0.0; NodeType::COUNT];
                    onehot[t.index()] = 1.0;
                    affine(&onehot, &w_ent, Some(&b_ent))
                }
            };
            base.iter().zip(&node_emb[t.index()]).map(|(a, b)| a + b).collect()
        })
        .collect();
    let mut attention = Vec::new();
    for l in 0..cfg.n_layers {
        let mut att = AttentionMap::new();
        let p = |s: &str| format!("layer{l}.{s}");
        let (wq, bq) = (param_mat(model, &p("q.weight")), param_vec(model, &p("q.bias")));
        let (wk, bk) = (param_mat(model, &p("k.weight")), param_vec(model, &p("k.bias")));
        let (wv, bv) = (param_mat(model, &p("v.weight")), param_vec(model, &p("v.bias")));
        let (wo, bo) = (param_mat(model, &p("out.weight")), param_vec(model, &p("out.bias")));
        let a_src = param_mat(model, &p("att_src"));
        let a_tgt = param_mat(model, &p("att_tgt"));
        let gamma = param_vec(model, &p("norm.gamma"));
        let beta = param_vec(model, &p("norm.beta"));
        let q: Mat = h.iter().map(|x| affine(x, &wq, Some(&bq))).collect();
        let mut next = Vec::with_capacity(n);
        for t in 0..n {
            let tt = g.node_type(t).index();
            let mut agg = vec![0.0; d];
            for head in 0..nh {
                let cols = head * dk..(head + 1) * dk;
                let mut scores = Vec::new();
                for s in 0..n {
                    if adj[s][t] == 0 {
                        continue;
                    }
                    let st = g.node_type(s).index();
                    let mut input = h[s].clone();
                    if l == 0 {
                        input.iter_mut().zip(&edge_emb[adj[s][t] - 1]).for_each(|(a, b)| *a += b);
                    }
                    let k = affine(&input, &wk, Some(&bk));
                    let v = affine(&input, &wv, Some(&bv));
                    let mut sc = 0.0;
                    for j in cols.clone() {
                        sc += k[j] * a_src[st][j] + q[t][j] * a_tgt[tt][j];
                    }
                    scores.push((s, sc / (dk as f64).sqrt(), v));
                }
                if scores.is_empty() {
                    continue;
                }
                let m = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = scores.iter().map(|s| (s.1 - m).exp()).sum();
                for (s, sc, v) in &scores {
                    let a = (sc - m).exp() / z;
                    att.entry((*s, t)).or_insert_with(|| vec![0.0; nh])[head] = a;
                    for j in cols.clone() {
                        agg[j] += a * v[j];
                    }
                }
            }
            let mut out = affine(&agg, &wo, Some(&bo));
            if cfg.residual {
                out.iter_mut().zip(&h[t]).for_each(|(a, b)| *a += b);
            }
            next.push(layer_norm(&out, &gamma, &beta).into_iter().map(|x| x.max(0.0)).collect());
        }
        h = next;
        attention.push(att);
    }
    let wff = param_mat(model, "head.ff.weight");
    let bff = param_vec(model, "head.ff.bias");
    let gamma = param_vec(model, "head.norm.gamma");
    let beta = param_vec(model, "head.norm.beta");
    let wout = param_mat(model, "head.out.weight");
    let bout = param_vec(model, "head.out.bias");
    let probs = g
        .txn_nodes()
        .map(|t| {
            let mut z: Vec<f64> = h[t].iter().map(|x| x.tanh()).collect();
            z.extend_from_slice(g.features(t).unwrap());
            let z = affine(&z, &wff, Some(&bff));
            let z: Vec<f64> = layer_norm(&z, &gamma, &beta).into_iter().map(|x| x.max(0.0)).collect();
            let logits = affine(&z, &wout, Some(&bout));
            let m = logits[0].max(logits[1]);
            let (e0, e1) = ((logits[0] - m).exp(), (logits[1] - m).exp());
            [e0 / (e0 + e1), e1 / (e0 + e1)]
        })
        .collect();
    (probs, attention)
}

/// Largest gap between the predictor's full-graph forward and the dense
/// oracle over `n_graphs` random graphs of at most 20 nodes.
pub fn dense_oracle_max_diff(n_graphs: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..n_graphs {
        let g = (0..)
            .map(|k| random_graph(seed * 100 + k, 6, 3, 4))
            .find(|g| g.num_nodes() <= 20)
            .unwrap();
        let cfg = PredictorConfig { n_hid: 8, n_layers: 2, n_heads: 2, dropout: 0.2, n_ff: 10, residual: seed % 2 == 0 };
        let mut model = Predictor::new(cfg, g.feature_dim(), seed).unwrap();
        jitter_params(&mut model, seed + 7, 0.5);
        let txns: Vec<usize> = g.txn_nodes().collect();
        let got = model.predict_view(&g, &GraphView::full(&g).unwrap(), &txns).unwrap();
        for (s, want) in got.iter().zip(dense_predict(&model, &g)) {
            worst = worst.max((s.legit_probability - want[0]).abs()).max((s.fraud_probability - want[1]).abs());
        }
    }
    worst
}

/// Largest deviation from one of the per-head attention sums over every
/// node with incoming messages, across `n` sampled subgraphs.
pub fn attention_sum_max_dev(n: u64) -> f64 {
    let g = random_graph(42, 80, 12, 4);
    let txns: Vec<usize> = g.txn_nodes().collect();
    let cfg = PredictorConfig { n_hid: 8, n_layers: 2, n_heads: 4, dropout: 0.2, n_ff: 10, residual: true };
    let mut model = Predictor::new(cfg, g.feature_dim(), 1).unwrap();
    jitter_params(&mut model, 2, 1.0);
    let mut r = rng(3);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let seeds: Vec<usize> = (0..r.random_range(1..5)).map(|_| txns[r.random_range(0..txns.len())]).collect();
        let fanout = if r.random::<bool>() { Some(r.random_range(1..4)) } else { None };
        let sub = sample_khop(&g, &seeds, 2, fanout, &mut r).unwrap();
        let view = GraphView::from_subgraph(&g, &sub).unwrap();
        let mut tape = Tape::with_frozen_params();
        let enc = model.encode(&mut tape, &view, Mode::Train, &mut r, None).unwrap();
        let nh = model.config.n_heads;
        for alpha in &enc.attention {
            let mut sums = vec![0.0; view.num_nodes() * nh];
            let mut has = vec![false; view.num_nodes()];
            for (m, &dst) in view.msg_dst.iter().enumerate() {
                has[dst] = true;
                for h in 0..nh {
                    sums[dst * nh + h] += alpha[m * nh + h];
                }
            }
            for v in 0..view.num_nodes() {
                if has[v] {
                    for h in 0..nh {
                        worst = worst.max((sums[v * nh + h] - 1.0).abs());
                    }
                }
            }
        }
    }
    worst
}
