//! Reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records one forward pass. Parameters enter through
//! [`Graph::param`] and receive gradients in [`Graph::backward`]; everything
//! created with [`Graph::input`] is treated as a constant.

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Mat};

/// Sentinel in a gather index meaning "read zero" (used for conv padding).
pub const PAD: usize = usize::MAX;

const LN_EPS: f64 = 1e-5;
pub const LOGIT_CLAMP: f64 = 30.0;
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        rstd: Vec<f64>,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Arc<[usize]>),
    MeanRows(Var),
    Abs(Var),
    SumAll(Var),
    BceLogit(Var, f64),
    SoftmaxXent(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::with_capacity(128),
            params: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.params.get(&id) {
            return *v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let mut out = Mat::zeros(av.rows, bv.cols);
        matmul_acc(av, bv, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.cols, "matmul_bt inner dims");
        let mut out = Mat::zeros(av.rows, bv.rows);
        matmul_bt_acc(av, bv, &mut out);
        self.push(out, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert!(out.same_shape(self.value(b)), "add shapes");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let bv = self.value(b);
        let mut out = self.value(a).clone();
        assert!(out.same_shape(bv), "sub shapes");
        for (o, y) in out.data.iter_mut().zip(&bv.data) {
            *o -= y;
        }
        self.push(out, Op::Sub(a, b))
    }

    /// Adds a 1×cols row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let rv = self.value(row);
        let mut out = self.value(a).clone();
        assert_eq!(rv.len(), out.cols, "add_row width");
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut out = self.value(a).clone();
        out.scale(s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = gelu(*v);
        }
        self.push(out, Op::Gelu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Row-wise layer normalization with 1×cols gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let cols = xv.cols;
        let mut xhat = Mat::zeros(xv.rows, cols);
        let mut out = Mat::zeros(xv.rows, cols);
        let mut rstd = Vec::with_capacity(xv.rows);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat.data[r * cols + c] = h;
                out.data[r * cols + c] = h * gv.data[c] + bv.data[c];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r)
                .copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.rows, rows, "concat_cols rows");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + pv.cols].copy_from_slice(pv.row(r));
            }
            off += pv.cols;
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// `out.data[i] = a.data[index[i]]` (or 0 for [`PAD`]), reshaped to rows×cols.
    pub fn gather(&mut self, a: Var, index: Arc<[usize]>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather size");
        let av = self.value(a);
        let data = index
            .iter()
            .map(|&i| if i == PAD { 0.0 } else { av.data[i] })
            .collect();
        self.push(Mat::from_vec(rows, cols, data), Op::Gather(a, index))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        self.push(out, Op::MeanRows(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = v.abs();
        }
        self.push(out, Op::Abs(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Mat::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    /// Σ|a − b| as a 1×1 node.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.sum_all(d)
    }

    /// Binary cross-entropy of a 1×1 logit against `label ∈ [0,1]`, with the
    /// logit clamped to ±[`LOGIT_CLAMP`] and the probability to
    /// [[`PROB_CLAMP`], 1 − [`PROB_CLAMP`]].
    pub fn bce_logit(&mut self, logit: Var, label: f64) -> Var {
        let phi = prob_from_logit(self.scalar(logit));
        let p = phi.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::BceLogit(logit, label))
    }

    /// Softmax cross-entropy of a 1×K logit row against class `target`.
    pub fn softmax_xent(&mut self, logits: Var, target: usize) -> Var {
        let lv = self.value(logits);
        assert!(target < lv.cols, "softmax_xent target");
        let probs = softmax(&lv.data);
        let loss = -probs[target].max(PROB_CLAMP).ln();
        self.push(Mat::from_vec(1, 1, vec![loss]), Op::SoftmaxXent(logits, target))
    }

    /// Back-propagates d(root)=1 and returns gradients of every parameter
    /// that participated in the graph.
    pub fn backward(&self, root: Var) -> Grads {
        let mut out = Grads::new(self.store.len());
        self.backward_into(root, &mut out);
        out
    }

    /// Like [`Graph::backward`] but adds into an existing accumulator.
    pub fn backward_into(&self, root: Var, out: &mut Grads) {
        let root_val = self.value(root);
        let seed = Mat::filled(root_val.rows, root_val.cols, 1.0);
        self.backward_from(root, seed, out)
    }

    pub fn backward_from(&self, root: Var, seed: Mat, out: &mut Grads) {
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(seed);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc_slot(&mut grads, *a, av);
                    matmul_bt_acc(&g, bv, ga);
                    let gb = acc_slot(&mut grads, *b, bv);
                    matmul_at_acc(av, &g, gb);
                }
                Op::MatMulBt(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = acc_slot(&mut grads, *a, av);
                    matmul_acc(&g, bv, ga);
                    let gb = acc_slot(&mut grads, *b, bv);
                    matmul_at_acc(&g, av, gb);
                }
                Op::Add(a, b) => {
                    add_into(&mut grads, *a, &g);
                    add_into(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    add_into(&mut grads, *a, &g);
                    let gb = acc_slot(&mut grads, *b, &g);
                    for (o, v) in gb.data.iter_mut().zip(&g.data) {
                        *o -= v;
                    }
                }
                Op::AddRow(a, row) => {
                    add_into(&mut grads, *a, &g);
                    let rv = self.value(*row);
                    let gr = acc_slot(&mut grads, *row, rv);
                    for r in 0..g.rows {
                        for (o, v) in gr.data.iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = acc_slot(&mut grads, *a, &g);
                    for (o, v) in ga.data.iter_mut().zip(&g.data) {
                        *o += s * v;
                    }
                }
                Op::Relu(a) => {
                    let ga = acc_slot(&mut grads, *a, &g);
                    for ((o, v), y) in ga.data.iter_mut().zip(&g.data).zip(&node.value.data) {
                        if *y > 0.0 {
                            *o += v;
                        }
                    }
                }
                Op::Gelu(a) => {
                    let av = self.value(*a);
                    let ga = acc_slot(&mut grads, *a, &g);
                    for ((o, v), x) in ga.data.iter_mut().zip(&g.data).zip(&av.data) {
                        *o += v * gelu_grad(*x);
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let ga = acc_slot(&mut grads, *a, &g);
                    for r in 0..y.rows {
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        let orow = &mut ga.data[r * y.cols..(r + 1) * y.cols];
                        for c in 0..y.cols {
                            orow[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let cols = xhat.cols;
                    let gv = self.value(*gamma).clone();
                    {
                        let gg = acc_slot(&mut grads, *gamma, &gv);
                        for r in 0..g.rows {
                            for c in 0..cols {
                                gg.data[c] += g.data[r * cols + c] * xhat.data[r * cols + c];
                            }
                        }
                    }
                    {
                        let gb = acc_slot(&mut grads, *beta, &gv);
                        for r in 0..g.rows {
                            for c in 0..cols {
                                gb.data[c] += g.data[r * cols + c];
                            }
                        }
                    }
                    let xv = self.value(*x);
                    let gx = acc_slot(&mut grads, *x, xv);
                    let n = cols as f64;
                    for r in 0..g.rows {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for c in 0..cols {
                            let d = g.data[r * cols + c] * gv.data[c];
                            sum_d += d;
                            sum_dx += d * xhat.data[r * cols + c];
                        }
                        for c in 0..cols {
                            let d = g.data[r * cols + c] * gv.data[c];
                            gx.data[r * cols + c] += rstd[r]
                                * (d - sum_d / n - xhat.data[r * cols + c] * sum_dx / n);
                        }
                    }
                }
                Op::SliceCols(a, start) => {
                    let av = self.value(*a);
                    let ga = acc_slot(&mut grads, *a, av);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            ga.data[r * av.cols + start + c] += g.data[r * g.cols + c];
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let pv = self.value(*p);
                        let gp = acc_slot(&mut grads, *p, pv);
                        for r in 0..g.rows {
                            for c in 0..pv.cols {
                                gp.data[r * pv.cols + c] += g.data[r * g.cols + off + c];
                            }
                        }
                        off += pv.cols;
                    }
                }
                Op::Gather(a, index) => {
                    let av = self.value(*a);
                    let ga = acc_slot(&mut grads, *a, av);
                    for (i, &src) in index.iter().enumerate() {
                        if src != PAD {
                            ga.data[src] += g.data[i];
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = 1.0 / av.rows as f64;
                    let ga = acc_slot(&mut grads, *a, av);
                    for r in 0..av.rows {
                        for c in 0..av.cols {
                            ga.data[r * av.cols + c] += g.data[c] * inv;
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = self.value(*a);
                    let ga = acc_slot(&mut grads, *a, av);
                    for ((o, v), x) in ga.data.iter_mut().zip(&g.data).zip(&av.data) {
                        if *x > 0.0 {
                            *o += v;
                        } else if *x < 0.0 {
                            *o -= v;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let av = self.value(*a);
                    let s = g.data[0];
                    let ga = acc_slot(&mut grads, *a, av);
                    ga.data.iter_mut().for_each(|o| *o += s);
                }
                Op::BceLogit(logit, label) => {
                    let z = self.scalar(*logit);
                    let phi = prob_from_logit(z);
                    let mut d = 0.0;
                    if z.abs() < LOGIT_CLAMP && phi > PROB_CLAMP && phi < 1.0 - PROB_CLAMP {
                        d = phi - label;
                    }
                    let lv = self.value(*logit);
                    let gl = acc_slot(&mut grads, *logit, lv);
                    gl.data[0] += g.data[0] * d;
                }
                Op::SoftmaxXent(logits, target) => {
                    let lv = self.value(*logits);
                    let probs = softmax(&lv.data);
                    let clamped = probs[*target] < PROB_CLAMP;
                    let gl = acc_slot(&mut grads, *logits, lv);
                    if !clamped {
                        for (c, p) in probs.iter().enumerate() {
                            let onehot = if c == *target { 1.0 } else { 0.0 };
                            gl.data[c] += g.data[0] * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn acc_slot<'a>(grads: &'a mut [Option<Mat>], v: Var, like: &Mat) -> &'a mut Mat {
    grads[v.0].get_or_insert_with(|| Mat::zeros(like.rows, like.cols))
}

fn add_into(grads: &mut [Option<Mat>], v: Var, g: &Mat) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(g),
        slot @ None => *slot = Some(g.clone()),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Logistic squashing with the logit clamped to ±[`LOGIT_CLAMP`].
pub fn prob_from_logit(z: f64) -> f64 {
    let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    1.0 / (1.0 + (-z).exp())
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Central-difference gradient checking.
pub mod gradcheck {
    use super::*;

    /// Worst elementwise relative error between analytic and central-difference
    /// gradients over every scalar of `ids`. The denominator is floored at
    /// `floor` so entries with vanishing gradients compare absolutely.
    pub fn max_rel_error(
        store: &ParamStore,
        ids: &[ParamId],
        h: f64,
        floor: f64,
        loss: impl Fn(&ParamStore) -> f64,
        analytic: &Grads,
    ) -> f64 {
        max_rel_error_sampled(store, ids, h, floor, usize::MAX, loss, analytic)
    }

    /// As [`max_rel_error`], probing at most `per_tensor` evenly strided
    /// scalars of each tensor.
    pub fn max_rel_error_sampled(
        store: &ParamStore,
        ids: &[ParamId],
        h: f64,
        floor: f64,
        per_tensor: usize,
        loss: impl Fn(&ParamStore) -> f64,
        analytic: &Grads,
    ) -> f64 {
        let mut worst: f64 = 0.0;
        let mut probe = store.clone();
        for id in ids {
            let n = store.get(*id).len();
            let k = n.min(per_tensor);
            for s in 0..k {
                let i = s * n / k;
                let orig = store.get(*id).data[i];
                probe.get_mut(*id).data[i] = orig + h;
                let fp = loss(&probe);
                probe.get_mut(*id).data[i] = orig - h;
                let fm = loss(&probe);
                probe.get_mut(*id).data[i] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let a = analytic.get(*id).map(|g| g.data[i]).unwrap_or(0.0);
                let denom = a.abs().max(numeric.abs()).max(floor);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}
