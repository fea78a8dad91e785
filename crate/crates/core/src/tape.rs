//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to matrix-valued variables and
//! replays them backwards to produce gradients. Every value is a 2-D matrix;
//! scalars are `1×1`. Token batches are stored as stacked rows, one block of
//! rows per sample, and the few operations that must not mix samples
//! ([`Tape::attention`]) take the number of blocks explicitly.
//!
//! Trainable weights live in a [`ParamSet`] and enter a tape through
//! [`Tape::param`]; repeated lookups of the same parameter share one node, so
//! its gradient is accumulated across every use.

use ndarray::{s, Array2, Axis, Zip};

use crate::nn::{ParamId, ParamSet};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Exp(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, groups: usize, probs: Vec<Mat> },
    Gather { src: Var, index: Vec<Option<usize>>, blocks: usize },
    SliceCols { src: Var, start: usize },
    SumSquares(Var),
    Sum(Var),
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::new(), param_vars: vec![None; params.len()] }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + row`, with the `1×m` row broadcast over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a ⊙ row`, with the `1×m` row broadcast over every row of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    /// Row-wise normalisation to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// Multi-head scaled dot-product attention without projections.
    ///
    /// `q` holds `groups` blocks of query rows and `k`, `v` hold `groups`
    /// blocks of key/value rows; attention never crosses block boundaries.
    /// Columns are split into `heads` equal slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (out, probs) = attention_forward(qv, kv, vv, heads, groups);
        self.push(out, Op::Attention { q, k, v, heads, groups, probs })
    }

    /// Probability matrices recorded by an attention node, one per
    /// `(group, head)`, group-major.
    pub fn attention_probs(&self, v: Var) -> Option<&[Mat]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Row gather. Output row `i` is the concatenation over `j < blocks` of
    /// source row `index[i * blocks + j]`, or zeros where the entry is `None`.
    pub fn gather(&mut self, src: Var, index: Vec<Option<usize>>, blocks: usize) -> Var {
        let sv = self.value(src);
        let c = sv.ncols();
        assert!(blocks > 0 && index.len() % blocks == 0, "gather index not a multiple of blocks");
        let rows = index.len() / blocks;
        let mut out = Mat::zeros((rows, blocks * c));
        for (slot, idx) in index.iter().enumerate() {
            if let Some(r) = *idx {
                let (i, j) = (slot / blocks, slot % blocks);
                out.slice_mut(s![i, j * c..(j + 1) * c]).assign(&sv.row(r));
            }
        }
        self.push(out, Op::Gather { src, index, blocks })
    }

    /// Repeats the whole of `src` vertically `times` times.
    pub fn tile_rows(&mut self, src: Var, times: usize) -> Var {
        let n = self.value(src).nrows();
        let index = (0..n * times).map(|r| Some(r % n)).collect();
        self.gather(src, index, 1)
    }

    /// Repeats each row of `src` `each` times consecutively.
    pub fn expand_rows(&mut self, src: Var, each: usize) -> Var {
        let n = self.value(src).nrows();
        let index = (0..n * each).map(|r| Some(r / each)).collect();
        self.gather(src, index, 1)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, width: usize) -> Var {
        let out = self.value(src).slice(s![.., start..start + width]).to_owned();
        self.push(out, Op::SliceCols { src, start })
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let ss = self.value(a).iter().map(|v| v * v).sum::<f64>();
        self.push(Mat::from_elem((1, 1), ss), Op::SumSquares(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).sum();
        self.push(Mat::from_elem((1, 1), total), Op::Sum(a))
    }

    /// `x · W + b` with parameters `w` (`in×out`) and `b` (`1×out`).
    pub fn linear(&mut self, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = self.param(w);
        let bv = self.param(b);
        let h = self.matmul(x, wv);
        self.add_row(h, bv)
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward requires a scalar loss");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, &g * self.value(*b));
                    accumulate(&mut grads, *b, &g * self.value(*a));
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let grow = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, grow);
                    accumulate(&mut grads, *a, &g * self.value(*row));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, &g * *c),
                Op::Gelu(a) => {
                    let mut da = g.clone();
                    Zip::from(&mut da).and(self.value(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * &node.value),
                Op::LayerNorm { x, inv_std } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.dim());
                    let n = y.ncols() as f64;
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gy = gr.dot(&yr) / n;
                        let mut out = dx.row_mut(r);
                        for c in 0..y.ncols() {
                            out[c] = inv * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, groups, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        &g,
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        *heads,
                        *groups,
                    );
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::Gather { src, index, blocks } => {
                    let sv = self.value(*src);
                    let c = sv.ncols();
                    let mut ds = Mat::zeros(sv.dim());
                    for (slot, idx) in index.iter().enumerate() {
                        if let Some(r) = *idx {
                            let (i, j) = (slot / blocks, slot % blocks);
                            let mut dst = ds.row_mut(r);
                            dst += &g.slice(s![i, j * c..(j + 1) * c]);
                        }
                    }
                    accumulate(&mut grads, *src, ds);
                }
                Op::SliceCols { src, start } => {
                    let mut ds = Mat::zeros(self.value(*src).dim());
                    let w = g.ncols();
                    ds.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads, *src, ds);
                }
                Op::SumSquares(a) => {
                    let scale = 2.0 * g[[0, 0]];
                    accumulate(&mut grads, *a, self.value(*a) * scale);
                }
                Op::Sum(a) => {
                    let da = Mat::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads, *a, da);
                }
            }
            grads[idx] = Some(g);
        }

        let params = self
            .param_vars
            .iter()
            .map(|pv| pv.and_then(|v| grads[v.0].clone()))
            .collect();
        Gradients { nodes: grads, params }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, delta: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &delta,
        slot @ None => *slot = Some(delta),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient for every parameter of the set, `None` where unused.
    pub fn params(&self) -> &[Option<Mat>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
}

/// Returns the attention output and one probability matrix per
/// `(group, head)`, ordered group-major.
pub(crate) fn attention_forward(
    q: &Mat,
    k: &Mat,
    v: &Mat,
    heads: usize,
    groups: usize,
) -> (Mat, Vec<Mat>) {
    let width = q.ncols();
    let dh = width / heads;
    let n = q.nrows() / groups;
    let m = k.nrows() / groups;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Mat::zeros((q.nrows(), v.ncols()));
    let mut probs = Vec::with_capacity(groups * heads);
    for gi in 0..groups {
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![gi * n..(gi + 1) * n, cols.clone()]);
            let kh = k.slice(s![gi * m..(gi + 1) * m, cols.clone()]);
            let vh = v.slice(s![gi * m..(gi + 1) * m, cols.clone()]);
            let mut p = qh.dot(&kh.t()) * scale;
            softmax_rows(&mut p);
            out.slice_mut(s![gi * n..(gi + 1) * n, cols]).assign(&p.dot(&vh));
            probs.push(p);
        }
    }
    (out, probs)
}

fn attention_backward(
    g: &Mat,
    q: &Mat,
    k: &Mat,
    v: &Mat,
    probs: &[Mat],
    heads: usize,
    groups: usize,
) -> (Mat, Mat, Mat) {
    let width = q.ncols();
    let dh = width / heads;
    let n = q.nrows() / groups;
    let m = k.nrows() / groups;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Mat::zeros(q.dim());
    let mut dk = Mat::zeros(k.dim());
    let mut dv = Mat::zeros(v.dim());
    for gi in 0..groups {
        for h in 0..heads {
            let p = &probs[gi * heads + h];
            let cols = h * dh..(h + 1) * dh;
            let qrows = gi * n..(gi + 1) * n;
            let krows = gi * m..(gi + 1) * m;
            let go = g.slice(s![qrows.clone(), cols.clone()]);
            let qh = q.slice(s![qrows.clone(), cols.clone()]);
            let kh = k.slice(s![krows.clone(), cols.clone()]);
            let vh = v.slice(s![krows.clone(), cols.clone()]);

            dv.slice_mut(s![krows.clone(), cols.clone()]).assign(&p.t().dot(&go));
            let dp = go.dot(&vh.t());
            // softmax Jacobian: dS = P ⊙ (dP − rowsum(dP ⊙ P))
            let mut ds = &dp * p;
            for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                let total = row.sum();
                Zip::from(&mut row).and(&prow).for_each(|d, &pv| *d -= pv * total);
            }
            ds *= scale;
            dq.slice_mut(s![qrows, cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![krows, cols]).assign(&ds.t().dot(&qh));
        }
    }
    (dq, dk, dv)
}
