use super::{axis_split, gemm, ParamId, ParamStore, Tensor};
use crate::error::{invalid, Error, Result};
use rand::Rng;
use std::sync::Arc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether stochastic layers (dropout) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Log(Var, f64),
    MatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, axis: usize, inv_std: Vec<f64> },
    Dropout { x: Var, mask: Vec<f64> },
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Reshape(Var),
    Gather { x: Var, idx: Vec<usize> },
    ScatterAdd { x: Var, idx: Vec<usize> },
    SegmentSoftmax { x: Var, seg: Vec<usize>, n_seg: usize },
    Concat { parts: Vec<Var> },
    SpMM { x: Var, a: Arc<SparseMatrix> },
    HeadDot { a: Var, ia: Vec<usize>, b: Var, ib: Vec<usize>, heads: usize },
    HeadScatter { w: Var, x: Var, src: Vec<usize>, dst: Vec<usize>, heads: usize },
}

/// Sparse matrix in coordinate form: entry `k` adds `weight[k] · x[col[k]]`
/// into output row `row[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row: Vec<usize>,
    pub col: Vec<usize>,
    pub weight: Vec<f64>,
}

impl SparseMatrix {
    pub fn new(n_rows: usize, n_cols: usize, row: Vec<usize>, col: Vec<usize>, weight: Vec<f64>) -> Result<Self> {
        if row.len() != col.len() || row.len() != weight.len() {
            return Err(invalid("sparse matrix coordinate lists differ in length"));
        }
        if row.iter().any(|&r| r >= n_rows) || col.iter().any(|&c| c >= n_cols) {
            return Err(invalid("sparse matrix coordinate out of range"));
        }
        Ok(Self { n_rows, n_cols, row, col, weight })
    }

    pub fn nnz(&self) -> usize {
        self.row.len()
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations. Nodes are appended, so every operation's
/// inputs precede it and a reverse sweep is a valid topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    bound: Vec<(ParamId, Var)>,
    frozen_params: bool,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Accumulates parameter gradients into `store` (`Tensor::grad`).
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        for &(pid, var) in &tape.bound {
            if let Some(g) = self.get(var) {
                let t = store.get_mut(pid);
                match &mut t.grad {
                    Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => t.grad = Some(g.to_vec()),
                }
            }
        }
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let dim = |s: &[usize], i: usize| {
        let off = nd - s.len();
        if i < off {
            1
        } else {
            s[i - off]
        }
    };
    (0..nd)
        .map(|i| {
            let (da, db) = (dim(a, i), dim(b, i));
            if da == db || db == 1 {
                Some(da)
            } else if da == 1 {
                Some(db)
            } else {
                None
            }
        })
        .collect()
}

/// `b` repeats along every leading axis of `a`, e.g. a bias added to rows.
fn is_row_broadcast(a: &[usize], b: &[usize]) -> bool {
    !b.is_empty() && b.len() < a.len() && a[a.len() - b.len()..] == *b && b.iter().product::<usize>() > 0
}

/// Row-major strides of `s` aligned to `out`, zero along broadcast dims.
fn broadcast_strides(s: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - s.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..s.len()).rev() {
        strides[i + off] = if s[i] == 1 && out[i + off] != 1 { 0 } else { acc };
        acc *= s[i];
    }
    strides
}

fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for k in 0..total {
        f(k, ia, ib);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.data.len()]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters are recorded as constants, so gradients
    /// flow only to explicitly created variables.
    pub fn with_frozen_params() -> Self {
        Self { frozen_params: true, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records `t` as a leaf; it requires grad iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// Records `t` as a leaf that requires grad.
    pub fn variable(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Binds parameter `id` of `store`. Repeated calls return the same
    /// handle so every use accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.param_vars.len() <= i {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, !self.frozen_params);
        self.param_vars[i] = Some(v);
        self.bound.push((id, v));
        v
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::ShapeMismatch { left: sa.clone(), right: sb.clone() })?;
        let (da, db) = (self.value(a), self.value(b));
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else if is_row_broadcast(&sa, &sb) {
            let w = db.len();
            let mut out = Vec::with_capacity(da.len());
            for row in da.chunks_exact(w) {
                out.extend(row.iter().zip(db).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let mut out = vec![0.0; out_shape.iter().product()];
            let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_broadcast(&out_shape, &ta, &tb, |k, ia, ib| out[k] = f(da[ia], db[ib]));
            out
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out_shape, data, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, data, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// `x + c` elementwise.
    pub fn shift(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Shift(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// `ln(x + eps)` elementwise.
    pub fn log(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, |v| (v + eps).ln(), Op::Log(x, eps))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch { left: sa.to_vec(), right: sb.to_vec() });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<()> {
        let s = self.shape(x);
        if axis >= s.len() {
            return Err(invalid(format!("axis {axis} out of range for shape {s:?}")));
        }
        if s[axis] == 0 {
            return Err(invalid(format!("empty axis {axis} in shape {s:?}")));
        }
        Ok(())
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let max = (0..len).map(|i| xs[at(i)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (xs[at(i)] - max).exp();
                    out[at(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    out[at(i)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes to zero mean and unit (biased) variance along `axis`.
    /// Affine scale and shift are applied separately by [`super::LayerNormAffine`].
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        self.check_axis(x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..inner {
                let at = |i: usize| o * len * inner + i * inner + j;
                let mean = (0..len).map(|i| xs[at(i)]).sum::<f64>() / len as f64;
                let var = (0..len).map(|i| (xs[at(i)] - mean).powi(2)).sum::<f64>() / len as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[o * inner + j] = is;
                for i in 0..len {
                    out[at(i)] = (xs[at(i)] - mean) * is;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::LayerNorm { x, axis, inv_std }, rg))
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` in train mode;
    /// identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(invalid(format!("dropout probability {p} outside [0, 1)")));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let data = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape, data, Op::Dropout { x, mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(invalid("mean of empty tensor"));
        }
        let s = self.value(x).iter().sum::<f64>() / n as f64;
        let rg = self.rg(x);
        Ok(self.push(vec![1], vec![s], Op::Mean(x), rg))
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(invalid(format!("axis {axis} out of range for shape {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xs = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..len {
                let row = &xs[(o * len + i) * inner..(o * len + i + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        let mut new_shape = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(new_shape, out, Op::SumAxis { x, axis }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::ShapeMismatch { left: self.shape(x).to_vec(), right: shape.to_vec() });
        }
        let data = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), data, Op::Reshape(x), rg))
    }

    fn row_width(&self, x: Var) -> usize {
        self.shape(x)[1..].iter().product()
    }

    /// Selects rows (first-axis slices) of `x` by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let rows = shape[0];
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(invalid(format!("row index {bad} out of range for {rows} rows")));
        }
        let w = self.row_width(x);
        let xs = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            out.extend_from_slice(&xs[i * w..(i + 1) * w]);
        }
        let mut new_shape = shape;
        new_shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(new_shape, out, Op::Gather { x, idx: idx.to_vec() }, rg))
    }

    /// Sums row `i` of `x` into output row `idx[i]`; the output has `n_out` rows.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape[0] != idx.len() {
            return Err(Error::ShapeMismatch { left: shape, right: vec![idx.len()] });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(invalid(format!("target row {bad} out of range for {n_out} rows")));
        }
        let w = self.row_width(x);
        let xs = self.value(x);
        let mut out = vec![0.0; n_out * w];
        for (r, &t) in idx.iter().enumerate() {
            for (acc, v) in out[t * w..(t + 1) * w].iter_mut().zip(&xs[r * w..(r + 1) * w]) {
                *acc += v;
            }
        }
        let mut new_shape = shape;
        new_shape[0] = n_out;
        let rg = self.rg(x);
        Ok(self.push(new_shape, out, Op::ScatterAdd { x, idx: idx.to_vec() }, rg))
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    pub fn segment_softmax(&mut self, x: Var, seg: &[usize], n_seg: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape[0] != seg.len() {
            return Err(Error::ShapeMismatch { left: shape, right: vec![seg.len()] });
        }
        if let Some(&bad) = seg.iter().find(|&&s| s >= n_seg) {
            return Err(invalid(format!("segment {bad} out of range for {n_seg} segments")));
        }
        let w = self.row_width(x);
        let xs = self.value(x);
        let mut max = vec![f64::NEG_INFINITY; n_seg * w];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..w {
                let m = &mut max[s * w + c];
                *m = m.max(xs[r * w + c]);
            }
        }
        let mut out = vec![0.0; xs.len()];
        let mut sum = vec![0.0; n_seg * w];
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..w {
                let e = (xs[r * w + c] - max[s * w + c]).exp();
                out[r * w + c] = e;
                sum[s * w + c] += e;
            }
        }
        for (r, &s) in seg.iter().enumerate() {
            for c in 0..w {
                out[r * w + c] /= sum[s * w + c];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SegmentSoftmax { x, seg: seg.to_vec(), n_seg }, rg))
    }

    /// `a · x` for a constant sparse `a` and 2-d `x`.
    pub fn spmm(&mut self, a: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != a.n_cols {
            return Err(Error::ShapeMismatch { left: vec![a.n_rows, a.n_cols], right: shape });
        }
        let w = shape[1];
        let xs = self.value(x);
        let mut out = vec![0.0; a.n_rows * w];
        for k in 0..a.nnz() {
            let (r, c, v) = (a.row[k], a.col[k], a.weight[k]);
            for (acc, x) in out[r * w..(r + 1) * w].iter_mut().zip(&xs[c * w..(c + 1) * w]) {
                *acc += v * x;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![a.n_rows, w], out, Op::SpMM { x, a: Arc::clone(a) }, rg))
    }

    fn check_rows(&self, x: Var, idx: &[usize]) -> Result<usize> {
        let shape = self.shape(x);
        if shape.len() != 2 {
            return Err(invalid(format!("expected a 2-d tensor, got shape {shape:?}")));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= shape[0]) {
            return Err(invalid(format!("row index {bad} out of range for {} rows", shape[0])));
        }
        Ok(shape[1])
    }

    /// Per-head dot products of gathered rows: `out[m, h]` is the dot of the
    /// `h`-th column block of `a[ia[m]]` and `b[ib[m]]`. Column count must
    /// divide by `heads`.
    pub fn head_dot(&mut self, a: Var, ia: &[usize], b: Var, ib: &[usize], heads: usize) -> Result<Var> {
        let (wa, wb) = (self.check_rows(a, ia)?, self.check_rows(b, ib)?);
        if wa != wb || ia.len() != ib.len() || heads == 0 || wa % heads != 0 {
            return Err(Error::ShapeMismatch { left: self.shape(a).to_vec(), right: self.shape(b).to_vec() });
        }
        let dk = wa / heads;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = vec![0.0; ia.len() * heads];
        for (m, (&i, &j)) in ia.iter().zip(ib).enumerate() {
            let (ra, rb) = (&va[i * wa..(i + 1) * wa], &vb[j * wa..(j + 1) * wa]);
            for h in 0..heads {
                out[m * heads + h] = ra[h * dk..(h + 1) * dk].iter().zip(&rb[h * dk..(h + 1) * dk]).map(|(x, y)| x * y).sum();
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let op = Op::HeadDot { a, ia: ia.to_vec(), b, ib: ib.to_vec(), heads };
        Ok(self.push(vec![ia.len(), heads], out, op, rg))
    }

    /// Head-weighted message passing: `out[dst[m]] += w[m, h] · x[src[m]]`
    /// applied to column block `h` of every row, for `w` of shape `[M, heads]`.
    pub fn head_scatter(&mut self, w: Var, x: Var, src: &[usize], dst: &[usize], n_out: usize, heads: usize) -> Result<Var> {
        let d = self.check_rows(x, src)?;
        if self.shape(w) != [src.len(), heads] || dst.len() != src.len() || heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch { left: self.shape(w).to_vec(), right: vec![src.len(), heads] });
        }
        if let Some(&bad) = dst.iter().find(|&&t| t >= n_out) {
            return Err(invalid(format!("target row {bad} out of range for {n_out} rows")));
        }
        let dk = d / heads;
        let (vw, vx) = (self.value(w), self.value(x));
        let mut out = vec![0.0; n_out * d];
        for (m, (&s, &t)) in src.iter().zip(dst).enumerate() {
            let row = &vx[s * d..(s + 1) * d];
            let acc = &mut out[t * d..(t + 1) * d];
            for h in 0..heads {
                let c = vw[m * heads + h];
                for k in h * dk..(h + 1) * dk {
                    acc[k] += c * row[k];
                }
            }
        }
        let rg = self.rg(w) || self.rg(x);
        let op = Op::HeadScatter { w, x, src: src.to_vec(), dst: dst.to_vec(), heads };
        Ok(self.push(vec![n_out, d], out, op, rg))
    }

    /// Concatenates 2-d tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| invalid("concat of zero tensors"))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::ShapeMismatch { left: self.shape(*first).to_vec(), right: s.to_vec() });
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::Concat { parts: parts.to_vec() }, rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(invalid(format!("backward needs a scalar loss, got shape {:?}", ln.shape)));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {
                if let Some($buf) = grad_slot(grads, nodes, $v) $body
            };
        }
        let val = |v: Var| nodes[v.0].data.as_slice();
        let shp = |v: Var| nodes[v.0].shape.as_slice();
        let out = node.data.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (a, b) = (*a, *b);
                if shp(a) == shp(b) {
                    with_grad!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                    with_grad!(b, |gb| { gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y) });
                } else if is_row_broadcast(shp(a), shp(b)) {
                    with_grad!(a, |ga| { ga.iter_mut().zip(g).for_each(|(x, y)| *x += y) });
                    with_grad!(b, |gb| {
                        for row in g.chunks_exact(gb.len()) {
                            gb.iter_mut().zip(row).for_each(|(x, y)| *x += sign * y);
                        }
                    });
                } else {
                    let ta = broadcast_strides(shp(a), &node.shape);
                    let tb = broadcast_strides(shp(b), &node.shape);
                    with_grad!(a, |ga| { for_each_broadcast(&node.shape, &ta, &tb, |k, ia, _| ga[ia] += g[k]) });
                    with_grad!(b, |gb| {
                        for_each_broadcast(&node.shape, &ta, &tb, |k, _, ib| gb[ib] += sign * g[k])
                    });
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (va, vb) = (val(a), val(b));
                if shp(a) == shp(b) {
                    with_grad!(a, |ga| { for k in 0..g.len() { ga[k] += g[k] * vb[k] } });
                    with_grad!(b, |gb| { for k in 0..g.len() { gb[k] += g[k] * va[k] } });
                } else if is_row_broadcast(shp(a), shp(b)) {
                    let w = vb.len();
                    with_grad!(a, |ga| { for k in 0..g.len() { ga[k] += g[k] * vb[k % w] } });
                    with_grad!(b, |gb| { for k in 0..g.len() { gb[k % w] += g[k] * va[k] } });
                } else {
                    let ta = broadcast_strides(shp(a), &node.shape);
                    let tb = broadcast_strides(shp(b), &node.shape);
                    with_grad!(a, |ga| {
                        for_each_broadcast(&node.shape, &ta, &tb, |k, ia, ib| ga[ia] += g[k] * vb[ib])
                    });
                    with_grad!(b, |gb| {
                        for_each_broadcast(&node.shape, &ta, &tb, |k, ia, ib| gb[ib] += g[k] * va[ia])
                    });
                }
            }
            Op::Scale(x, c) => with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b) }),
            Op::Shift(x) | Op::Reshape(x) => {
                with_grad!(*x, |gx| { gx.iter_mut().zip(g).for_each(|(a, b)| *a += b) })
            }
            Op::Relu(x) => {
                let xs = val(*x);
                with_grad!(*x, |gx| { for k in 0..g.len() { if xs[k] > 0.0 { gx[k] += g[k] } } })
            }
            Op::Tanh(x) => with_grad!(*x, |gx| { for k in 0..g.len() { gx[k] += g[k] * (1.0 - out[k] * out[k]) } }),
            Op::Sigmoid(x) => with_grad!(*x, |gx| { for k in 0..g.len() { gx[k] += g[k] * out[k] * (1.0 - out[k]) } }),
            Op::Log(x, eps) => {
                let xs = val(*x);
                with_grad!(*x, |gx| { for k in 0..g.len() { gx[k] += g[k] / (xs[k] + eps) } })
            }
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let (m, k) = (shp(a)[0], shp(a)[1]);
                let n = shp(b)[1];
                with_grad!(a, |ga| { gemm(m, n, k, g, false, val(b), true, ga, true) });
                with_grad!(b, |gb| { gemm(k, m, n, val(a), true, g, false, gb, true) });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * len * inner + i * inner + j;
                            let dot: f64 = (0..len).map(|i| g[at(i)] * out[at(i)]).sum();
                            for i in 0..len {
                                gx[at(i)] += out[at(i)] * (g[at(i)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { x, axis, inv_std } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                with_grad!(*x, |gx| {
                    let nf = len as f64;
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |i: usize| o * len * inner + i * inner + j;
                            let mg: f64 = (0..len).map(|i| g[at(i)]).sum::<f64>() / nf;
                            let mgx: f64 = (0..len).map(|i| g[at(i)] * out[at(i)]).sum::<f64>() / nf;
                            let is = inv_std[o * inner + j];
                            for i in 0..len {
                                gx[at(i)] += is * (g[at(i)] - mg - out[at(i)] * mgx);
                            }
                        }
                    }
                });
            }
            Op::Dropout { x, mask } => {
                with_grad!(*x, |gx| { for k in 0..g.len() { gx[k] += g[k] * mask[k] } })
            }
            Op::Sum(x) => with_grad!(*x, |gx| { gx.iter_mut().for_each(|a| *a += g[0]) }),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                with_grad!(*x, |gx| { gx.iter_mut().for_each(|a| *a += g[0] / n) })
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(shp(*x), *axis);
                with_grad!(*x, |gx| {
                    for o in 0..outer {
                        for i in 0..len {
                            let dst = &mut gx[(o * len + i) * inner..(o * len + i + 1) * inner];
                            dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]).for_each(|(a, b)| *a += b);
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                let w: usize = shp(*x)[1..].iter().product();
                with_grad!(*x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        gx[i * w..(i + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::ScatterAdd { x, idx } => {
                let w: usize = shp(*x)[1..].iter().product();
                with_grad!(*x, |gx| {
                    for (r, &t) in idx.iter().enumerate() {
                        gx[r * w..(r + 1) * w].iter_mut().zip(&g[t * w..(t + 1) * w]).for_each(|(a, b)| *a += b);
                    }
                });
            }
            Op::SpMM { x, a } => {
                let w = node.shape[1];
                with_grad!(*x, |gx| {
                    for k in 0..a.nnz() {
                        let (r, c, v) = (a.row[k], a.col[k], a.weight[k]);
                        gx[c * w..(c + 1) * w].iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(acc, y)| *acc += v * y);
                    }
                });
            }
            Op::HeadDot { a, ia, b, ib, heads } => {
                let d = shp(*a)[1];
                let dk = d / heads;
                let (va, vb) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for (m, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                        for h in 0..*heads {
                            let c = g[m * heads + h];
                            for k in h * dk..(h + 1) * dk {
                                ga[i * d + k] += c * vb[j * d + k];
                            }
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    for (m, (&i, &j)) in ia.iter().zip(ib).enumerate() {
                        for h in 0..*heads {
                            let c = g[m * heads + h];
                            for k in h * dk..(h + 1) * dk {
                                gb[j * d + k] += c * va[i * d + k];
                            }
                        }
                    }
                });
            }
            Op::HeadScatter { w, x, src, dst, heads } => {
                let d = shp(*x)[1];
                let dk = d / heads;
                let (vw, vx) = (val(*w), val(*x));
                with_grad!(*w, |gw| {
                    for (m, (&s, &t)) in src.iter().zip(dst).enumerate() {
                        for h in 0..*heads {
                            let r = h * dk..(h + 1) * dk;
                            gw[m * heads + h] +=
                                g[t * d + r.start..t * d + r.end].iter().zip(&vx[s * d + r.start..s * d + r.end]).map(|(p, q)| p * q).sum::<f64>();
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    for (m, (&s, &t)) in src.iter().zip(dst).enumerate() {
                        for h in 0..*heads {
                            let c = vw[m * heads + h];
                            for k in h * dk..(h + 1) * dk {
                                gx[s * d + k] += c * g[t * d + k];
                            }
                        }
                    }
                });
            }
            Op::SegmentSoftmax { x, seg, n_seg } => {
                let w: usize = node.shape[1..].iter().product();
                let mut dot = vec![0.0; n_seg * w];
                for (r, &s) in seg.iter().enumerate() {
                    for c in 0..w {
                        dot[s * w + c] += g[r * w + c] * out[r * w + c];
                    }
                }
                with_grad!(*x, |gx| {
                    for (r, &s) in seg.iter().enumerate() {
                        for c in 0..w {
                            let k = r * w + c;
                            gx[k] += out[k] * (g[k] - dot[s * w + c]);
                        }
                    }
                });
            }
            Op::Concat { parts } => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = shp(p)[1];
                    with_grad!(p, |gp| {
                        for r in 0..rows {
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + off..r * total + off + w])
                                .for_each(|(a, b)| *a += b);
                        }
                    });
                    off += w;
                }
            }
        }
    }
}
