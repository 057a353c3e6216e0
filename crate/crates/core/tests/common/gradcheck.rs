//! Finite-difference checks shared by the gradient tests and the acceptance run.

use super::{jitter_params, numeric_grad, random_records, rel_err, rng};
use fraudgraph_core::explainer::{explainer_loss, extract_subgraph, masked_probs, ExplainerConfig, ExplainerMasks};
use fraudgraph_core::hetgraph::{build_graph, HeteroGraph, Label};
use fraudgraph_core::predictor::{nll_loss, GraphView, Predictor, PredictorConfig};
use fraudgraph_core::tensor::{Linear, Mode, ParamStore, SparseMatrix, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const H: f64 = 1e-6;

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

fn uniform(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, r)
}

/// Values bounded away from zero so kinks stay out of the difference stencil.
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(0.2..1.0) * if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(0.3..2.0)).collect()).unwrap()
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> Case {
    Case { name, inputs, build: Box::new(build) }
}

/// One case per differentiable tape op, on random inputs.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = rng(seed);
    let mut cases = vec![
        case("add", vec![uniform(&[3, 4], &mut r), uniform(&[3, 4], &mut r)], |t, v| t.add(v[0], v[1]).unwrap()),
        case("add_broadcast_row", vec![uniform(&[3, 4], &mut r), uniform(&[4], &mut r)], |t, v| t.add(v[0], v[1]).unwrap()),
        case("add_broadcast_col", vec![uniform(&[3, 4], &mut r), uniform(&[3, 1], &mut r)], |t, v| t.add(v[0], v[1]).unwrap()),
        case("sub", vec![uniform(&[2, 5], &mut r), uniform(&[5], &mut r)], |t, v| t.sub(v[0], v[1]).unwrap()),
        case("mul", vec![uniform(&[3, 4], &mut r), uniform(&[3, 4], &mut r)], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("mul_broadcast", vec![uniform(&[3, 4], &mut r), uniform(&[3, 1], &mut r)], |t, v| t.mul(v[0], v[1]).unwrap()),
        case("scale", vec![uniform(&[6], &mut r)], |t, v| t.scale(v[0], -1.7)),
        case("shift", vec![uniform(&[6], &mut r)], |t, v| t.shift(v[0], 0.4)),
        case("relu", vec![away_from_zero(&[3, 3], &mut r)], |t, v| t.relu(v[0])),
        case("tanh", vec![uniform(&[3, 3], &mut r)], |t, v| t.tanh(v[0])),
        case("sigmoid", vec![uniform(&[3, 3], &mut r)], |t, v| t.sigmoid(v[0])),
        case("log", vec![positive(&[3, 3], &mut r)], |t, v| t.log(v[0], 1e-12)),
        case("matmul", vec![uniform(&[3, 4], &mut r), uniform(&[4, 2], &mut r)], |t, v| t.matmul(v[0], v[1]).unwrap()),
        case("softmax_rows", vec![uniform(&[3, 4], &mut r)], |t, v| t.softmax(v[0], 1).unwrap()),
        case("softmax_cols", vec![uniform(&[3, 4], &mut r)], |t, v| t.softmax(v[0], 0).unwrap()),
        case("layer_norm", vec![uniform(&[3, 5], &mut r)], |t, v| t.layer_norm(v[0], 1, 1e-5).unwrap()),
        case("layer_norm_axis0", vec![uniform(&[4, 3], &mut r)], |t, v| t.layer_norm(v[0], 0, 1e-5).unwrap()),
        case("dropout_train", vec![uniform(&[4, 4], &mut r)], |t, v| {
            t.dropout(v[0], 0.3, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
        }),
        case("sum", vec![uniform(&[2, 3], &mut r)], |t, v| t.sum(v[0])),
        case("mean", vec![uniform(&[2, 3], &mut r)], |t, v| t.mean(v[0]).unwrap()),
        case("sum_axis", vec![uniform(&[3, 4], &mut r)], |t, v| t.sum_axis(v[0], 1).unwrap()),
        case("reshape", vec![uniform(&[3, 4], &mut r)], |t, v| t.reshape(v[0], &[2, 6]).unwrap()),
        case("gather_rows", vec![uniform(&[4, 3], &mut r)], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]).unwrap()),
        case("scatter_add_rows", vec![uniform(&[4, 3], &mut r)], |t, v| t.scatter_add_rows(v[0], &[1, 1, 0, 4], 5).unwrap()),
        case("segment_softmax", vec![uniform(&[6, 2], &mut r)], |t, v| t.segment_softmax(v[0], &[0, 2, 0, 1, 2, 0], 4).unwrap()),
        case("concat_cols", vec![uniform(&[3, 2], &mut r), uniform(&[3, 3], &mut r)], |t, v| t.concat_cols(&[v[0], v[1]]).unwrap()),
        case("head_dot", vec![uniform(&[4, 6], &mut r), uniform(&[3, 6], &mut r)], |t, v| {
            t.head_dot(v[0], &[0, 3, 3, 1, 2], v[1], &[2, 0, 1, 1, 0], 2).unwrap()
        }),
        case("head_scatter", vec![uniform(&[5, 3], &mut r), uniform(&[4, 6], &mut r)], |t, v| {
            t.head_scatter(v[0], v[1], &[0, 1, 3, 3, 2], &[2, 0, 0, 1, 2], 3, 3).unwrap()
        }),
    ];
    let n = 5;
    let (mut row, mut col, mut weight) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        for j in 0..n {
            if r.random::<f64>() < 0.4 {
                row.push(i);
                col.push(j);
                weight.push(r.random_range(-1.0..1.0));
            }
        }
    }
    let a = Arc::new(SparseMatrix::new(n, n, row, col, weight).unwrap());
    cases.push(case("spmm", vec![uniform(&[n, 3], &mut r)], move |t, v| t.spmm(&a, v[0]).unwrap()));
    cases
}

/// Contracts an op output with fixed random weights so every output entry
/// contributes to the scalar being differentiated.
fn contract(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let shape = tape.shape(out).to_vec();
    let w = Tensor::uniform(&shape, 1.0, &mut rng(seed ^ 0x5eed));
    let w = tape.leaf(&w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

pub fn check_case(c: &Case) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| tape.variable(t)).collect();
    let out = (c.build)(&mut tape, &vars);
    let loss = contract(&mut tape, out, 1);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> =
        vars.iter().zip(&c.inputs).flat_map(|(&v, t)| grads.get(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.numel()])).collect();
    let mut f = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t)).collect();
        let out = (c.build)(&mut tape, &vars);
        let loss = contract(&mut tape, out, 1);
        tape.scalar(loss)
    };
    let numeric: Vec<f64> = numeric_grad(&mut f, &c.inputs, H).concat();
    rel_err(&analytic, &numeric)
}

/// Parameters of a `ParamStore` as gradient-check inputs; returns the
/// analytic gradient from `loss_of` and the numeric one.
fn store_gradients(store: &ParamStore, loss_of: &dyn Fn(&mut Tape, &ParamStore) -> Var) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let loss = loss_of(&mut tape, store);
    let grads = tape.backward(loss).unwrap();
    let mut s = store.clone();
    s.zero_grad();
    grads.accumulate_into(&tape, &mut s);
    let analytic: Vec<f64> =
        s.tensors().iter().flat_map(|t| t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()])).collect();
    let inputs: Vec<Tensor> = store.tensors().to_vec();
    let mut work = store.clone();
    let mut f = |xs: &[Tensor]| {
        for (dst, src) in work.tensors_mut().iter_mut().zip(xs) {
            dst.data_mut().copy_from_slice(src.data());
        }
        let mut tape = Tape::new();
        let loss = loss_of(&mut tape, &work);
        tape.scalar(loss)
    };
    (analytic, numeric_grad(&mut f, &inputs, H).concat())
}

/// Two linear layers with a tanh between them and a softmax NLL on top.
pub fn two_layer_network(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let l1 = Linear::new(&mut store, "l1", 4, 5, &mut r);
    let l2 = Linear::new(&mut store, "l2", 5, 2, &mut r);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += r.random_range(-0.3..0.3));
    }
    let x = Tensor::uniform(&[3, 4], 1.0, &mut r);
    let labels = [Label::Fraud, Label::Legit, Label::Fraud];
    let (a, n) = store_gradients(&store, &|tape, s| {
        let xv = tape.leaf(&x);
        let h = l1.forward(tape, s, xv).unwrap();
        let h = tape.tanh(h);
        let z = l2.forward(tape, s, h).unwrap();
        let p = tape.softmax(z, 1).unwrap();
        nll_loss(tape, p, &labels, None).unwrap()
    });
    rel_err(&a, &n)
}

pub fn small_config() -> PredictorConfig {
    PredictorConfig { n_hid: 4, n_layers: 2, n_heads: 2, dropout: 0.2, n_ff: 6, residual: true }
}

/// A random typed graph with at most `max_nodes` nodes.
pub fn tiny_graph(seed: u64, max_nodes: usize) -> HeteroGraph {
    (0..)
        .map(|k| build_graph(&random_records(seed * 1000 + k, 3, 2, 3, 0.3)).unwrap())
        .find(|g| g.num_nodes() <= max_nodes && g.num_edges() > 0)
        .unwrap()
}

/// Predictor classification loss against every parameter, dropout active
/// with a fixed mask.
pub fn predictor_end_to_end(seed: u64) -> f64 {
    let g = tiny_graph(seed, 10);
    let mut model = Predictor::new(small_config(), g.feature_dim(), seed).unwrap();
    jitter_params(&mut model, seed + 1, 0.3);
    let view = GraphView::full(&g).unwrap();
    let targets = view.txn_rows.clone();
    let labels: Vec<Label> = targets.iter().map(|&t| view.labels[t].unwrap()).collect();
    let template = model.clone();
    let (a, n) = store_gradients(model.params(), &|tape, s| {
        // The clone shares parameter ids with `s`, so bound gradients land
        // in the matching slots.
        let mut m = template.clone();
        m.params_mut().copy_values_from(s);
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let enc = m.encode(tape, &view, Mode::Train, &mut r, None).unwrap();
        let p = m.head(tape, &enc, &view, &targets, Mode::Train, &mut r).unwrap();
        nll_loss(tape, p, &labels, None).unwrap()
    });
    rel_err(&a, &n)
}

/// Explainer objective against the raw edge and feature masks.
pub fn explainer_end_to_end(seed: u64) -> f64 {
    let g = tiny_graph(seed, 10);
    let mut model = Predictor::new(small_config(), g.feature_dim(), seed).unwrap();
    jitter_params(&mut model, seed + 1, 0.3);
    let target = g.txn_nodes().next().unwrap();
    let cs = extract_subgraph(&g, target, 2).unwrap();
    let masks = ExplainerMasks::random(&cs, 1.0, &mut rng(seed + 2));
    let cfg = ExplainerConfig::default();
    let label = [g.label(target).unwrap()];
    let loss_of = |tape: &mut Tape, e: Var, v: Var| {
        let me = tape.sigmoid(e);
        let mv = tape.sigmoid(v);
        let p = masked_probs(&model, tape, &cs, &[cs.target_local], me, mv).unwrap();
        explainer_loss(tape, p, &label, me, mv, &cfg).unwrap()
    };
    let mut tape = Tape::with_frozen_params();
    let e = tape.variable(&masks.edges);
    let v = tape.variable(&masks.features);
    let loss = loss_of(&mut tape, e, v);
    let grads = tape.backward(loss).unwrap();
    let analytic = [grads.get(e).unwrap().to_vec(), grads.get(v).unwrap().to_vec()].concat();
    let mut f = |xs: &[Tensor]| {
        let mut tape = Tape::with_frozen_params();
        let e = tape.leaf(&xs[0]);
        let v = tape.leaf(&xs[1]);
        let loss = loss_of(&mut tape, e, v);
        tape.scalar(loss)
    };
    let numeric = numeric_grad(&mut f, &[masks.edges.clone(), masks.features.clone()], H).concat();
    rel_err(&analytic, &numeric)
}

/// Fraud score of the explained target against the squashed edge mask.
pub fn score_wrt_edge_mask(seed: u64) -> f64 {
    let g = tiny_graph(seed, 10);
    let mut model = Predictor::new(small_config(), g.feature_dim(), seed).unwrap();
    jitter_params(&mut model, seed + 1, 0.3);
    let target = g.txn_nodes().next().unwrap();
    let cs = extract_subgraph(&g, target, 2).unwrap();
    let mut r = rng(seed + 3);
    let em = Tensor::new(vec![cs.num_edges()], (0..cs.num_edges()).map(|_| r.random_range(0.1..0.9)).collect()).unwrap();
    let fm = Tensor::full(&[cs.num_nodes(), g.feature_dim()], 1.0);
    let score = |tape: &mut Tape, e: Var| {
        let f = tape.leaf(&fm);
        let p = masked_probs(&model, tape, &cs, &[cs.target_local], e, f).unwrap();
        let p = tape.reshape(p, &[2, 1]).unwrap();
        let fraud = tape.gather_rows(p, &[1]).unwrap();
        tape.sum(fraud)
    };
    let mut tape = Tape::with_frozen_params();
    let e = tape.variable(&em);
    let out = score(&mut tape, e);
    let analytic = tape.backward(out).unwrap().get(e).unwrap().to_vec();
    let mut f = |xs: &[Tensor]| {
        let mut tape = Tape::with_frozen_params();
        let e = tape.leaf(&xs[0]);
        let out = score(&mut tape, e);
        tape.scalar(out)
    };
    rel_err(&analytic, &numeric_grad(&mut f, &[em], H).concat())
}
