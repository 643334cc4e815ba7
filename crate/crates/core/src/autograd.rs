//! A small tape-based reverse-mode autodiff over 2-D `f64` arrays.
//!
//! Every forward pass builds a fresh [`Graph`]; parameters enter it as leaves
//! tagged with their index in the model's parameter store so that
//! [`Graph::backward`] can hand back one gradient per parameter. The heavy
//! operations of the model (graph aggregation, blockwise attention, the LSTM
//! scan) are fused ops with hand-written backward passes.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};

use crate::attention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Rc<Array2<f64>>),
    Relu(Var),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    GatherRows(Var, Rc<Vec<Option<usize>>>),
    BlockLeftMul {
        a: Rc<Array2<f64>>,
        x: Var,
    },
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        key_mask: Option<Rc<Vec<bool>>>,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
    },
    LstmScan {
        gx: Var,
        w_hh: Var,
        valid: Rc<Vec<bool>>,
        batch: usize,
        reverse: bool,
        cells: Array2<f64>,
        gates: Array2<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Rc<Vec<usize>>,
        weights: Rc<Vec<f64>>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients keyed by parameter index.
#[derive(Debug, Default)]
pub struct Gradients {
    pub by_param: HashMap<usize, Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, param: usize) -> Option<&Array2<f64>> {
        self.by_param.get(&param)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.mapv_inplace(|v| v / sum);
}

fn mm(a: ArrayView2<f64>, b: ArrayView2<f64>, c: &mut ArrayViewMut2<f64>, beta: f64) {
    general_mat_mul(1.0, &a, &b, beta, c);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Leaf for parameter `id`; repeated calls return the same node.
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add shape mismatch");
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    /// `x + row`, broadcasting a `1 x n` row over every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Elementwise product with a constant (dropout masks, validity masks).
    pub fn mul_const(&mut self, x: Var, c: Rc<Array2<f64>>) -> Var {
        let value = self.value(x) * &*c;
        let ng = self.ng(x);
        self.push(value, Op::MulConst(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(x);
        let value = Array2::from_shape_vec((rows, cols), src.iter().copied().collect())
            .expect("reshape: element count differs");
        let ng = self.ng(x);
        self.push(value, Op::Reshape(x), ng)
    }

    /// Builds a matrix from selected rows of `x`; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, rows: Rc<Vec<Option<usize>>>) -> Var {
        let src = self.value(x);
        let mut value = Array2::zeros((rows.len(), src.ncols()));
        for (i, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                value.row_mut(i).assign(&src.row(r));
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::GatherRows(x, rows), ng)
    }

    /// Applies the square constant `a` to each consecutive block of `a.nrows()` rows of `x`.
    pub fn block_left_mul(&mut self, a: Rc<Array2<f64>>, x: Var) -> Var {
        let n = a.nrows();
        let src = self.value(x);
        assert_eq!(src.nrows() % n, 0, "block_left_mul: rows not a multiple of block");
        let mut value = Array2::zeros(src.dim());
        for b in 0..src.nrows() / n {
            let rows = b * n..(b + 1) * n;
            mm(
                a.view(),
                src.slice(s![rows.clone(), ..]),
                &mut value.slice_mut(s![rows, ..]),
                0.0,
            );
        }
        let ng = self.ng(x);
        self.push(value, Op::BlockLeftMul { a, x }, ng)
    }

    /// Multi-head scaled dot-product attention inside consecutive blocks of `block` rows.
    /// `key_mask[r] == false` removes row `r` as a key.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        block: usize,
        heads: usize,
        key_mask: Option<Rc<Vec<bool>>>,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, dim) = qv.dim();
        assert_eq!(rows % block, 0);
        assert_eq!(dim % heads, 0);
        let out = attention::forward(qv.view(), kv.view(), vv.view(), block, heads, key_mask.as_deref().map(|m| m.as_slice()));
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(
            out,
            Op::BlockAttention {
                q,
                k,
                v,
                block,
                heads,
                key_mask,
            },
            ng,
        )
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for row in value.rows_mut() {
            softmax_in_place(row);
        }
        let ng = self.ng(x);
        self.push(value, Op::SoftmaxRows(x), ng)
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta` (both `1 x n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let src = self.value(x);
        let n = src.ncols() as f64;
        let mut xhat = Array2::zeros(src.dim());
        let mut inv_std = Array1::zeros(src.nrows());
        for (i, row) in src.rows().into_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            xhat.row_mut(i).assign(&row.mapv(|v| (v - mean) * is));
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// One direction of an LSTM over a time-major sequence.
    ///
    /// `gx` holds the input projections (bias included) with row `t * batch + b`
    /// and gate blocks `[i | f | g | o]`. Rows with `valid == false` do not
    /// advance the recurrence: state is carried through unchanged. Returns the
    /// hidden state after every step, same row layout.
    pub fn lstm_scan(&mut self, gx: Var, w_hh: Var, valid: Rc<Vec<bool>>, batch: usize, reverse: bool) -> Var {
        let gxv = self.value(gx);
        let whh = self.value(w_hh);
        let hidden = whh.nrows();
        assert_eq!(whh.ncols(), 4 * hidden);
        assert_eq!(gxv.ncols(), 4 * hidden);
        assert_eq!(gxv.nrows() % batch, 0);
        assert_eq!(valid.len(), gxv.nrows());
        let steps = gxv.nrows() / batch;

        let mut hs = Array2::zeros((gxv.nrows(), hidden));
        let mut cells = Array2::zeros((gxv.nrows(), hidden));
        let mut gates = Array2::zeros((gxv.nrows(), 4 * hidden));
        let mut h_prev = Array2::<f64>::zeros((batch, hidden));
        let mut c_prev = Array2::<f64>::zeros((batch, hidden));
        let mut pre = Array2::<f64>::zeros((batch, 4 * hidden));

        for k in 0..steps {
            let t = if reverse { steps - 1 - k } else { k };
            let r = t * batch..(t + 1) * batch;
            pre.assign(&gxv.slice(s![r.clone(), ..]));
            mm(h_prev.view(), whh.view(), &mut pre.view_mut(), 1.0);
            for b in 0..batch {
                let row = t * batch + b;
                if !valid[row] {
                    continue;
                }
                for j in 0..hidden {
                    let i_g = sigmoid(pre[[b, j]]);
                    let f_g = sigmoid(pre[[b, hidden + j]]);
                    let g_g = pre[[b, 2 * hidden + j]].tanh();
                    let o_g = sigmoid(pre[[b, 3 * hidden + j]]);
                    let c = f_g * c_prev[[b, j]] + i_g * g_g;
                    let h = o_g * c.tanh();
                    gates[[row, j]] = i_g;
                    gates[[row, hidden + j]] = f_g;
                    gates[[row, 2 * hidden + j]] = g_g;
                    gates[[row, 3 * hidden + j]] = o_g;
                    c_prev[[b, j]] = c;
                    h_prev[[b, j]] = h;
                }
            }
            hs.slice_mut(s![r.clone(), ..]).assign(&h_prev);
            cells.slice_mut(s![r, ..]).assign(&c_prev);
        }
        let ng = self.ng(gx) || self.ng(w_hh);
        self.push(
            hs,
            Op::LstmScan {
                gx,
                w_hh,
                valid,
                batch,
                reverse,
                cells,
                gates,
            },
            ng,
        )
    }

    /// `sum_i weights[i] * -ln softmax(logits_i)[targets[i]]` as a `1 x 1` value.
    pub fn cross_entropy(&mut self, logits: Var, targets: Rc<Vec<usize>>, weights: Rc<Vec<f64>>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (i, row) in probs.rows_mut().into_iter().enumerate() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            if weights[i] != 0.0 {
                loss += weights[i] * (lse - lv[[i, targets[i]]]);
            }
            let mut row = row;
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let ng = self.ng(logits);
        self.push(
            Array2::from_elem((1, 1), loss),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            },
            ng,
        )
    }

    /// Reverse pass from a `1 x 1` root; returns gradients of every parameter leaf reached.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |v: Var, d: Array2<f64>| {
                if !self.nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => *existing += &d,
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(*b, self.value(*a).t().dot(&g));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*b) {
                        acc(*b, g.clone());
                    }
                    acc(*a, g);
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    acc(*x, g);
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(*a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(*b, &g * self.value(*a));
                    }
                }
                Op::MulConst(x, c) => acc(*x, &g * &**c),
                Op::Relu(x) => {
                    let mut d = g;
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| {
                            if y <= 0.0 {
                                *d = 0.0
                            }
                        });
                    acc(*x, d);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        if self.ng(p) {
                            acc(p, g.slice(s![.., col..col + w]).to_owned());
                        }
                        col += w;
                    }
                }
                Op::Reshape(x) => {
                    let dim = self.value(*x).dim();
                    let d = Array2::from_shape_vec(dim, g.iter().copied().collect()).unwrap();
                    acc(*x, d);
                }
                Op::GatherRows(x, rows) => {
                    let mut d = Array2::zeros(self.value(*x).dim());
                    for (i, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            let mut dst = d.row_mut(r);
                            dst += &g.row(i);
                        }
                    }
                    acc(*x, d);
                }
                Op::BlockLeftMul { a, x } => {
                    let n = a.nrows();
                    let mut d = Array2::zeros(g.dim());
                    let at = a.t();
                    for b in 0..g.nrows() / n {
                        let r = b * n..(b + 1) * n;
                        mm(at, g.slice(s![r.clone(), ..]), &mut d.slice_mut(s![r, ..]), 0.0);
                    }
                    acc(*x, d);
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    block,
                    heads,
                    key_mask,
                } => {
                    let (dq, dk, dv) = attention::backward(
                        self.value(*q).view(),
                        self.value(*k).view(),
                        self.value(*v).view(),
                        node.value.view(),
                        g.view(),
                        *block,
                        *heads,
                        key_mask.as_deref().map(|m| m.as_slice()),
                    );
                    acc(*q, dq);
                    acc(*k, dk);
                    acc(*v, dv);
                }
                Op::SoftmaxRows(x) => {
                    let p = &node.value;
                    let mut d = &g * p;
                    for (mut drow, prow) in d.rows_mut().into_iter().zip(p.rows()) {
                        let s = drow.sum();
                        Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv -= pv * s);
                    }
                    acc(*x, d);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*gamma) {
                        acc(*gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*beta) {
                        acc(*beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        let mut d = Array2::zeros(dxhat.dim());
                        for i in 0..dxhat.nrows() {
                            let dr = dxhat.row(i);
                            let xr = xhat.row(i);
                            let s1 = dr.sum();
                            let s2 = dr.dot(&xr);
                            let is = inv_std[i];
                            Zip::from(d.row_mut(i))
                                .and(&dr)
                                .and(&xr)
                                .for_each(|o, &dv, &xv| *o = is / n * (n * dv - s1 - xv * s2));
                        }
                        acc(*x, d);
                    }
                }
                Op::LstmScan {
                    gx,
                    w_hh,
                    valid,
                    batch,
                    reverse,
                    cells,
                    gates,
                } => {
                    let (dgx, dw) = self.lstm_backward(*w_hh, valid, *batch, *reverse, cells, gates, &node.value, &g);
                    acc(*gx, dgx);
                    acc(*w_hh, dw);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let up = g[[0, 0]];
                    let mut d = probs.clone();
                    for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                        let w = weights[i] * up;
                        if w == 0.0 {
                            row.fill(0.0);
                            continue;
                        }
                        row[targets[i]] -= 1.0;
                        row.mapv_inplace(|v| v * w);
                    }
                    acc(*logits, d);
                }
            }
        }

        let by_param = self
            .params
            .iter()
            .map(|(&id, &v)| {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(self.value(v).dim()));
                (id, g)
            })
            .collect();
        Gradients { by_param }
    }

    #[allow(clippy::too_many_arguments)]
    fn lstm_backward(
        &self,
        w_hh: Var,
        valid: &[bool],
        batch: usize,
        reverse: bool,
        cells: &Array2<f64>,
        gates: &Array2<f64>,
        hs: &Array2<f64>,
        g: &Array2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let whh = self.value(w_hh);
        let hidden = whh.nrows();
        let steps = g.nrows() / batch;
        let mut dgx = Array2::zeros((g.nrows(), 4 * hidden));
        let mut dw = Array2::zeros(whh.dim());
        let mut dh_next = Array2::<f64>::zeros((batch, hidden));
        let mut dc_next = Array2::<f64>::zeros((batch, hidden));
        let zeros = Array2::<f64>::zeros((batch, hidden));

        // walk steps in the opposite order of the forward scan
        for k in (0..steps).rev() {
            let t = if reverse { steps - 1 - k } else { k };
            let prev_t = if k == 0 {
                None
            } else if reverse {
                Some(t + 1)
            } else {
                Some(t - 1)
            };
            let r = t * batch..(t + 1) * batch;
            let (h_prev, c_prev) = match prev_t {
                Some(p) => (
                    hs.slice(s![p * batch..(p + 1) * batch, ..]),
                    cells.slice(s![p * batch..(p + 1) * batch, ..]),
                ),
                None => (zeros.view(), zeros.view()),
            };
            let mut dh = dh_next.clone();
            dh += &g.slice(s![r.clone(), ..]);
            let mut dpre = Array2::<f64>::zeros((batch, 4 * hidden));
            for b in 0..batch {
                let row = t * batch + b;
                if !valid[row] {
                    // state passes through untouched
                    continue;
                }
                for j in 0..hidden {
                    let i_g = gates[[row, j]];
                    let f_g = gates[[row, hidden + j]];
                    let g_g = gates[[row, 2 * hidden + j]];
                    let o_g = gates[[row, 3 * hidden + j]];
                    let tc = cells[[row, j]].tanh();
                    let dhv = dh[[b, j]];
                    let dc = dc_next[[b, j]] + dhv * o_g * (1.0 - tc * tc);
                    dpre[[b, j]] = dc * g_g * i_g * (1.0 - i_g);
                    dpre[[b, hidden + j]] = dc * c_prev[[b, j]] * f_g * (1.0 - f_g);
                    dpre[[b, 2 * hidden + j]] = dc * i_g * (1.0 - g_g * g_g);
                    dpre[[b, 3 * hidden + j]] = dhv * tc * o_g * (1.0 - o_g);
                    dc_next[[b, j]] = dc * f_g;
                }
            }
            dgx.slice_mut(s![r, ..]).assign(&dpre);
            mm(h_prev.t(), dpre.view(), &mut dw.view_mut(), 1.0);
            let mut dh_prev = dpre.dot(&whh.t());
            for b in 0..batch {
                if !valid[t * batch + b] {
                    dh_prev.row_mut(b).assign(&dh.row(b));
                }
            }
            dh_next = dh_prev;
        }
        (dgx, dw)
    }
}
