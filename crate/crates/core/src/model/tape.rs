//! Reverse-mode autodiff over 2-D f64 matrices.
//!
//! A [`Graph`] is built per example. Parameter nodes read their values from a
//! borrowed [`ParamStore`]; gradients flow back only into nodes that require
//! them, so frozen parameters never receive a gradient.

use ndarray::{s, Array2, ArrayView2, Axis};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct AttnSaved {
    /// Per-head softmax probabilities, each `[tq, tk]`.
    probs: Vec<Mat>,
}

struct LnSaved {
    xhat: Mat,
    inv_std: Vec<f64>,
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Dropout(Var, Mat),
    LayerNorm(Var, Var, Var, LnSaved),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        saved: AttnSaved,
    },
    Gather(Var, Vec<usize>),
    ConcatRows(Var, Var),
    SelectRows(Var, Vec<usize>),
    MeanRows(Var),
    /// Summed negative log-likelihood; saves the softmax.
    CrossEntropy(Var, Vec<usize>, Mat),
    /// Summed squared error against constant targets.
    SquaredError(Var, Vec<f64>),
    Sum(Vec<Var>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    grad: bool,
}

/// Gradients by parameter id; `None` for parameters that got none.
pub struct Grads {
    pub by_param: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(id.0).and_then(Option::as_ref)
    }
}

pub struct Graph<'a> {
    params: &'a ParamStore,
    nodes: Vec<Node>,
    record: bool,
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}

impl<'a> Graph<'a> {
    /// A graph that records what backward needs.
    pub fn new(params: &'a ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A forward-only graph: nothing requires a gradient.
    pub fn inference(params: &'a ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Mat {
        match &self.nodes[v.0].op {
            Op::Param(id) => self.params.value(*id),
            _ => self.nodes[v.0].value.as_ref().expect("node value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op, grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            grad: grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let grad = self.record && self.params.is_trainable(id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let g = self.g(a) || self.g(b);
        self.push(v, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let g = self.g(a) || self.g(b);
        self.push(v, Op::Add(a, b), g)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        let g = self.g(a) || self.g(row);
        self.push(v, Op::AddRow(a, row), g)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let g = self.g(a);
        self.push(v, Op::Scale(a, c), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let g = self.g(a);
        self.push(v, Op::Gelu(a), g)
    }

    /// Inverted dropout with a precomputed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Mat) -> Var {
        let v = self.value(a) * &mask;
        let g = self.g(a);
        self.push(v, Op::Dropout(a, mask), g)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let v = &xhat * self.value(gamma) + self.value(beta);
        let g = self.g(x) || self.g(gamma) || self.g(beta);
        self.push(v, Op::LayerNorm(x, gamma, beta, LnSaved { xhat, inv_std }), g)
    }

    /// Scaled dot-product attention over already-projected `q [tq,d]`,
    /// `k [tk,d]`, `v [tk,d]`, split into `heads` column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (tq, d) = qv.dim();
        let tk = kv.nrows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((tq, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            if causal {
                for i in 0..tq {
                    for j in (i + 1)..tk {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        let g = self.g(q) || self.g(k) || self.g(v);
        let saved = AttnSaved {
            probs: if g { probs } else { Vec::new() },
        };
        self.push(out, Op::Attention { q, k, v, heads, saved }, g)
    }

    /// Rows of `table` at `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), ids);
        let g = self.g(table);
        self.push(v, Op::Gather(table, ids.to_vec()), g)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()]).expect("equal widths");
        let g = self.g(a) || self.g(b);
        self.push(v, Op::ConcatRows(a, b), g)
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        let g = self.g(a);
        self.push(v, Op::SelectRows(a, rows.to_vec()), g)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        let g = self.g(a);
        self.push(v, Op::MeanRows(a), g)
    }

    /// Sum over rows of `-log softmax(logits)[target]`, as a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let mut p = self.value(logits).clone();
        softmax_rows(&mut p);
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(i, &t)| -(p[[i, t]].max(f64::MIN_POSITIVE)).ln())
            .sum();
        let g = self.g(logits);
        self.push(Mat::from_elem((1, 1), nll), Op::CrossEntropy(logits, targets.to_vec(), p), g)
    }

    /// Sum of `(pred[i] - target[i])^2` over a column vector `pred`.
    pub fn squared_error(&mut self, pred: Var, targets: &[f64]) -> Var {
        let pv = self.value(pred);
        let v: f64 = pv.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum();
        let g = self.g(pred);
        self.push(Mat::from_elem((1, 1), v), Op::SquaredError(pred, targets.to_vec()), g)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let total: f64 = terms.iter().map(|&t| self.scalar(t)).sum();
        let g = terms.iter().any(|&t| self.g(t));
        self.push(Mat::from_elem((1, 1), total), Op::Sum(terms.to_vec()), g)
    }

    /// Backpropagates `seed * d root` into every trainable parameter.
    pub fn backward(&self, root: Var, seed: f64) -> Grads {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out: Vec<Option<Mat>> = (0..self.params.len()).map(|_| None).collect();
        if !self.nodes[root.0].grad {
            return Grads { by_param: out };
        }
        grads[root.0] = Some(Mat::from_elem(self.value(root).dim(), seed));

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match &mut out[id.0] {
                    Some(existing) => *existing += &gy,
                    slot => *slot = Some(gy),
                },
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        acc(&mut grads, *a, gy.dot(&self.value(*b).t()));
                    }
                    if self.g(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&gy));
                    }
                }
                Op::Add(a, b) => {
                    if self.g(*a) {
                        acc(&mut grads, *a, gy.clone());
                    }
                    if self.g(*b) {
                        acc(&mut grads, *b, gy);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.g(*row) {
                        acc(&mut grads, *row, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*a) {
                        acc(&mut grads, *a, gy);
                    }
                }
                Op::Scale(a, c) => acc(&mut grads, *a, gy * *c),
                Op::Gelu(a) => {
                    let d = self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, gy * d);
                }
                Op::Dropout(a, mask) => acc(&mut grads, *a, gy * mask),
                Op::LayerNorm(x, gamma, beta, saved) => {
                    if self.g(*gamma) {
                        let gg = (&gy * &saved.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        acc(&mut grads, *gamma, gg);
                    }
                    if self.g(*beta) {
                        acc(&mut grads, *beta, gy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*x) {
                        let gxhat = &gy * self.value(*gamma);
                        let n = gxhat.ncols() as f64;
                        let mut gx = Mat::zeros(gxhat.dim());
                        for r in 0..gxhat.nrows() {
                            let gr = gxhat.row(r);
                            let xr = saved.xhat.row(r);
                            let mean_g = gr.sum() / n;
                            let mean_gx = gr.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / n;
                            let is = saved.inv_std[r];
                            for c in 0..gxhat.ncols() {
                                gx[[r, c]] = is * (gr[c] - mean_g - xr[c] * mean_gx);
                            }
                        }
                        acc(&mut grads, *x, gx);
                    }
                }
                Op::Attention { q, k, v, heads, saved } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Mat::zeros(qv.dim());
                    let mut gk = Mat::zeros(kv.dim());
                    let mut gv = Mat::zeros(vv.dim());
                    for h in 0..*heads {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let p = &saved.probs[h];
                        let go = gy.slice(cols);
                        gv.slice_mut(cols).assign(&p.t().dot(&go));
                        let gp = go.dot(&vv.slice(cols).t());
                        // Softmax backward, row by row.
                        let mut gs = Mat::zeros(p.dim());
                        for r in 0..p.nrows() {
                            let dot: f64 = p.row(r).iter().zip(gp.row(r)).map(|(a, b)| a * b).sum();
                            for c in 0..p.ncols() {
                                gs[[r, c]] = p[[r, c]] * (gp[[r, c]] - dot) * scale;
                            }
                        }
                        gq.slice_mut(cols).assign(&gs.dot(&kv.slice(cols)));
                        gk.slice_mut(cols).assign(&gs.t().dot(&qv.slice(cols)));
                    }
                    if self.g(*q) {
                        acc(&mut grads, *q, gq);
                    }
                    if self.g(*k) {
                        acc(&mut grads, *k, gk);
                    }
                    if self.g(*v) {
                        acc(&mut grads, *v, gv);
                    }
                }
                Op::Gather(table, ids) => {
                    let mut gt = Mat::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gt.row_mut(id);
                        row += &gy.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).nrows();
                    if self.g(*a) {
                        acc(&mut grads, *a, gy.slice(s![..na, ..]).to_owned());
                    }
                    if self.g(*b) {
                        acc(&mut grads, *b, gy.slice(s![na.., ..]).to_owned());
                    }
                }
                Op::SelectRows(a, rows) => {
                    let mut ga = Mat::zeros(self.value(*a).dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &gy.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::MeanRows(a) => {
                    let n = self.value(*a).nrows();
                    let row = gy.row(0).mapv(|v| v / n as f64);
                    let ga = broadcast_rows(row.view().insert_axis(Axis(0)), n);
                    acc(&mut grads, *a, ga);
                }
                Op::CrossEntropy(logits, targets, p) => {
                    let s = gy[[0, 0]];
                    let mut gl = p * s;
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= s;
                    }
                    acc(&mut grads, *logits, gl);
                }
                Op::SquaredError(pred, targets) => {
                    let s = gy[[0, 0]];
                    let pv = self.value(*pred);
                    let mut gp = Mat::zeros(pv.dim());
                    for (i, t) in targets.iter().enumerate() {
                        gp[[i, 0]] = 2.0 * (pv[[i, 0]] - t) * s;
                    }
                    acc(&mut grads, *pred, gp);
                }
                Op::Sum(terms) => {
                    for &t in terms {
                        if self.g(t) {
                            acc(&mut grads, t, gy.clone());
                        }
                    }
                }
            }
        }
        Grads { by_param: out }
    }
}

fn broadcast_rows(row: ArrayView2<f64>, n: usize) -> Mat {
    row.broadcast((n, row.ncols())).expect("row vector").to_owned()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks every entry of every parameter against central differences.
    fn check(store: &mut ParamStore, f: &dyn Fn(&mut Graph) -> Var) {
        let grads = {
            let mut g = Graph::new(store);
            let root = f(&mut g);
            g.backward(root, 1.0)
        };
        let h = 1e-6;
        for id in store.ids() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(store.value(id).dim()));
            let dim = store.value(id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = store.value(id)[[r, c]];
                    store.value_mut(id)[[r, c]] = orig + h;
                    let up = { let mut g = Graph::inference(store); let v = f(&mut g); g.scalar(v) };
                    store.value_mut(id)[[r, c]] = orig - h;
                    let down = { let mut g = Graph::inference(store); let v = f(&mut g); g.scalar(v) };
                    store.value_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-3));
                    assert!(err < 1e-5, "{} [{r},{c}]: analytic {a} numeric {numeric}", store.name(id));
                }
            }
        }
    }

    #[test]
    fn attention_layer_norm_and_ce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let x = store.add("x", random(&mut rng, 4, 6));
        let mem = store.add("mem", random(&mut rng, 3, 6));
        let w = store.add("w", random(&mut rng, 6, 6));
        let gamma = store.add("gamma", random(&mut rng, 1, 6));
        let beta = store.add("beta", random(&mut rng, 1, 6));
        let out = store.add("out", random(&mut rng, 6, 5));
        let col = store.add("col", random(&mut rng, 6, 1));
        check(&mut store, &|g| {
            let (x, mem, w) = (g.param(x), g.param(mem), g.param(w));
            let (gamma, beta, out) = (g.param(gamma), g.param(beta), g.param(out));
            let n = g.layer_norm(x, gamma, beta);
            let q = g.matmul(n, w);
            let self_att = g.attention(q, q, n, 2, true);
            let cross = g.attention(self_att, mem, mem, 3, false);
            let act = g.gelu(cross);
            let both = g.concat_rows(act, mem);
            let picked = g.select_rows(both, &[0, 2, 5, 2]);
            let logits = g.matmul(picked, out);
            let ce = g.cross_entropy(logits, &[1, 0, 4, 2]);
            let pooled = g.mean_rows(both);
            let col = g.param(col);
            let head = g.matmul(pooled, col);
            let se = g.squared_error(head, &[0.3]);
            g.sum(&[ce, se])
        });
    }

    #[test]
    fn gather_add_row_scale_dropout_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::default();
        let table = store.add("table", random(&mut rng, 5, 4));
        let bias = store.add("bias", random(&mut rng, 1, 4));
        let proj = store.add("proj", random(&mut rng, 4, 1));
        let mask = Mat::from_shape_fn((3, 4), |(r, c)| if (r + c) % 3 == 0 { 0.0 } else { 1.5 });
        check(&mut store, &|g| {
            let t = g.param(table);
            let rows = g.gather(t, &[4, 1, 4]);
            let b = g.param(bias);
            let x = g.add_row(rows, b);
            let x = g.dropout(x, mask.clone());
            let x = g.scale(x, 0.7);
            let y = g.add(x, rows);
            let p = g.param(proj);
            let pred = g.matmul(y, p);
            g.squared_error(pred, &[0.1, -0.2, 0.5])
        });
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::default();
        let a = store.add("a", Mat::from_elem((1, 1), 2.0));
        let b = store.add("b", Mat::from_elem((1, 1), 3.0));
        store.set_trainable(a, false);
        let mut g = Graph::new(&store);
        let (va, vb) = (g.param(a), g.param(b));
        let prod = g.matmul(va, vb);
        let loss = g.squared_error(prod, &[0.0]);
        let grads = g.backward(loss, 1.0);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap()[[0, 0]], 2.0 * 6.0 * 2.0);
    }
}
