//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation of one forward pass. Composite
//! operations that dominate the model (attention, layer norm, the LWTA
//! competition, cross-entropy, KL terms) are single fused nodes with
//! hand-written adjoints; [`Tape::backward`] walks the tape once in reverse.

use std::borrow::Cow;

use crate::lwta::{block_softmax, relaxed_winners};
use crate::tensor::{gemm, sigmoid, softplus, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activations used in place of the competing units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pointwise {
    Relu,
    Elu,
    Silu,
    Linear,
}

impl Pointwise {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => x.max(0.0),
            Pointwise::Elu => {
                if x > 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Pointwise::Silu => x * sigmoid(x),
            Pointwise::Linear => x,
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Pointwise::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Pointwise::Elu => {
                if x > 0.0 {
                    1.0
                } else {
                    x.exp()
                }
            }
            Pointwise::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Pointwise::Linear => 1.0,
        }
    }
}

/// Layout of a batched attention call.
///
/// Query rows are `batch × q_len` (item-major), key/value rows are
/// `batch × k_len`. `key_valid[b * k_len + j]` masks padding keys.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    pub key_valid: Vec<bool>,
}

impl AttentionLayout {
    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && !(self.causal && j > i)
    }
}

/// Batched multi-head scaled dot-product attention on already projected
/// inputs. Returns the concatenated head outputs and, per `(item, head)`,
/// the `q_len × k_len` attention weights.
pub fn attention_kernel(q: &Matrix, k: &Matrix, v: &Matrix, layout: &AttentionLayout) -> (Matrix, Vec<Matrix>) {
    let d = q.cols();
    let dh = d / layout.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Matrix::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(layout.batch * layout.heads);
    let mut scores = vec![0.0; layout.k_len];
    for b in 0..layout.batch {
        for h in 0..layout.heads {
            let c0 = h * dh;
            let mut p = Matrix::zeros(layout.q_len, layout.k_len);
            for i in 0..layout.q_len {
                let qrow = &q.row(b * layout.q_len + i)[c0..c0 + dh];
                let mut max = f64::NEG_INFINITY;
                for (j, s) in scores.iter_mut().enumerate() {
                    if layout.allowed(b, i, j) {
                        let krow = &k.row(b * layout.k_len + j)[c0..c0 + dh];
                        let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                        *s = dot * scale;
                        max = max.max(*s);
                    } else {
                        *s = f64::NEG_INFINITY;
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let prow = p.row_mut(i);
                let mut sum = 0.0;
                for (pj, &s) in prow.iter_mut().zip(&scores) {
                    *pj = if s == f64::NEG_INFINITY { 0.0 } else { (s - max).exp() };
                    sum += *pj;
                }
                prow.iter_mut().for_each(|x| *x /= sum);
                let orow = &mut out.row_mut(b * layout.q_len + i)[c0..c0 + dh];
                for j in 0..layout.k_len {
                    let w = p[(i, j)];
                    if w != 0.0 {
                        let vrow = &v.row(b * layout.k_len + j)[c0..c0 + dh];
                        for (o, x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
            }
            probs.push(p);
        }
    }
    (out, probs)
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `a + row`, broadcasting a `1 × n` row over all rows of `a`.
    AddRow(Var, Var),
    Scale(Var, f64),
    Reparam {
        mean: Var,
        rho: Var,
        eps: Matrix,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        shift: Var,
        normed: Matrix,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<Matrix>,
    },
    Lwta {
        pre: Var,
        relaxed: Matrix,
        units: usize,
        temperature: f64,
    },
    Pointwise {
        x: Var,
        kind: Pointwise,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Matrix,
        norm: f64,
    },
    KlGaussian {
        mean: Var,
        rho: Var,
    },
    KlWinners {
        pre: Var,
        units: usize,
        row_weight: Vec<f64>,
        probs: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// Operation record for one forward pass. Leaves may borrow their values
/// for the lifetime `'a` of the tape.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A constant leaf that borrows its value.
    pub fn constant_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf that borrows its value.
    pub fn param_ref(&mut self, value: &'a Matrix) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a single row");
        assert_eq!(r.cols(), self.value(a).cols(), "add_row width mismatch");
        let mut value = self.value(a).clone();
        let rv = r.data().to_vec();
        for i in 0..value.rows() {
            for (x, b) in value.row_mut(i).iter_mut().zip(&rv) {
                *x += b;
            }
        }
        let ng = self.ng(a) || self.ng(row);
        self.push(value, Op::AddRow(a, row), ng)
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale_assign(s);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// `mean + softplus(rho) ⊙ eps`.
    pub fn reparam(&mut self, mean: Var, rho: Var, eps: Matrix) -> Var {
        let m = self.value(mean);
        let r = self.value(rho);
        assert_eq!(m.shape(), eps.shape());
        let mut value = m.clone();
        for ((w, &r), &e) in value.data_mut().iter_mut().zip(r.data()).zip(eps.data()) {
            *w += softplus(r) * e;
        }
        let ng = self.ng(mean) || self.ng(rho);
        self.push(value, Op::Reparam { mean, rho, eps }, ng)
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(value, Op::Gather { table, ids }, ng)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Var {
        let xv = self.value(x);
        let g = self.value(gain).data().to_vec();
        let s = self.value(shift).data().to_vec();
        let n = xv.cols();
        let mut normed = Matrix::zeros(xv.rows(), n);
        let mut value = Matrix::zeros(xv.rows(), n);
        let mut inv_std = Vec::with_capacity(xv.rows());
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let nr = normed.row_mut(i);
            for (o, &v) in nr.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let vr = value.row_mut(i);
            for c in 0..n {
                vr[c] = normed[(i, c)] * g[c] + s[c];
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(shift);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                shift,
                normed,
                inv_std,
            },
            ng,
        )
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttentionLayout) -> Var {
        let (value, probs) = attention_kernel(self.value(q), self.value(k), self.value(v), &layout);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        self.push(value, Op::Attention { q, k, v, layout, probs }, ng)
    }

    /// Attention weights recorded by an attention node.
    pub fn attention_weights(&self, node: Var) -> Option<&[Matrix]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Competing-unit masking: `pre ⊙ softmax((pre + noise) / T)` per block.
    pub fn lwta(&mut self, pre: Var, noise: &Matrix, units: usize, temperature: f64) -> Var {
        let p = self.value(pre);
        let relaxed = relaxed_winners(p, noise, units, temperature);
        let value = p.zip_map(&relaxed, |a, b| a * b);
        let ng = self.ng(pre);
        self.push(
            value,
            Op::Lwta {
                pre,
                relaxed,
                units,
                temperature,
            },
            ng,
        )
    }

    /// The relaxed winner sample stored by an LWTA node.
    pub fn lwta_relaxed(&self, node: Var) -> Option<&Matrix> {
        match &self.nodes[node.0].op {
            Op::Lwta { relaxed, .. } => Some(relaxed),
            _ => None,
        }
    }

    pub fn pointwise(&mut self, x: Var, kind: Pointwise) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let ng = self.ng(x);
        self.push(value, Op::Pointwise { x, kind }, ng)
    }

    /// Sum of `-log softmax(logits[i])[targets[i]]` over labelled rows, divided by `norm`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<Option<usize>>, norm: f64) -> Var {
        let l = self.value(logits);
        assert_eq!(l.rows(), targets.len());
        let mut probs = l.clone();
        let mut total = 0.0;
        for (i, t) in targets.iter().enumerate() {
            let row = probs.row_mut(i);
            let lse = crate::tensor::log_sum_exp(row);
            if let Some(t) = *t {
                total += lse - row[t];
            }
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::scalar(total / norm),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                norm,
            },
            ng,
        )
    }

    pub fn kl_gaussian(&mut self, mean: Var, rho: Var) -> Var {
        let kl = crate::var_weights::kl_terms(self.value(mean).data(), self.value(rho).data());
        let ng = self.ng(mean) || self.ng(rho);
        self.push(Matrix::scalar(kl), Op::KlGaussian { mean, rho }, ng)
    }

    /// `Σ_rows w_row · KL(softmax(pre_block) ‖ uniform)` over all blocks.
    pub fn kl_winners(&mut self, pre: Var, units: usize, row_weight: Vec<f64>) -> Var {
        let p = self.value(pre);
        assert_eq!(p.rows(), row_weight.len());
        let probs = block_softmax(p, units);
        let log_u = (units as f64).ln();
        let mut total = 0.0;
        for (i, &w) in row_weight.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let row: f64 = probs
                .row(i)
                .iter()
                .map(|&q| if q > 0.0 { q * (q.ln() + log_u) } else { 0.0 })
                .sum();
            total += w * row;
        }
        let ng = self.ng(pre);
        self.push(
            Matrix::scalar(total),
            Op::KlWinners {
                pre,
                units,
                row_weight,
                probs,
            },
            ng,
        )
    }

    /// `Σ c_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let total = terms.iter().map(|&(v, c)| c * self.value(v).item()).sum();
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        self.push(Matrix::scalar(total), Op::WeightedSum(terms), ng)
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node<'a>, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    gemm(g, false, bv, true, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    gemm(av, true, g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.ng(*row) {
                    let mut dr = Matrix::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (d, x) in dr.data_mut().iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    acc(*row, dr);
                }
            }
            Op::Scale(a, s) => {
                let mut d = g.clone();
                d.scale_assign(*s);
                acc(*a, d);
            }
            Op::Reparam { mean, rho, eps } => {
                acc(*mean, g.clone());
                if self.ng(*rho) {
                    let r = self.value(*rho);
                    let mut d = g.clone();
                    for ((d, &r), &e) in d.data_mut().iter_mut().zip(r.data()).zip(eps.data()) {
                        *d *= e * sigmoid(r);
                    }
                    acc(*rho, d);
                }
            }
            Op::Gather { table, ids } => {
                let t = self.value(*table);
                let mut d = Matrix::zeros(t.rows(), t.cols());
                for (i, &id) in ids.iter().enumerate() {
                    for (dst, x) in d.row_mut(id).iter_mut().zip(g.row(i)) {
                        *dst += x;
                    }
                }
                acc(*table, d);
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                normed,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let n = g.cols();
                if self.ng(*gain) || self.ng(*shift) {
                    let mut dg = Matrix::zeros(1, n);
                    let mut ds = Matrix::zeros(1, n);
                    for i in 0..g.rows() {
                        for c in 0..n {
                            dg.data_mut()[c] += g[(i, c)] * normed[(i, c)];
                            ds.data_mut()[c] += g[(i, c)];
                        }
                    }
                    acc(*gain, dg);
                    acc(*shift, ds);
                }
                if self.ng(*x) {
                    let mut dx = Matrix::zeros(g.rows(), n);
                    let mut dn = vec![0.0; n];
                    for i in 0..g.rows() {
                        for c in 0..n {
                            dn[c] = g[(i, c)] * gv[c];
                        }
                        let mean_dn = dn.iter().sum::<f64>() / n as f64;
                        let mean_dn_x = dn.iter().zip(normed.row(i)).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let nr = normed.row(i);
                        for (c, out) in dx.row_mut(i).iter_mut().enumerate() {
                            *out = inv_std[i] * (dn[c] - mean_dn - nr[c] * mean_dn_x);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = qv.cols();
                let dh = d / layout.heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = Matrix::zeros(qv.rows(), d);
                let mut dk = Matrix::zeros(kv.rows(), d);
                let mut dv = Matrix::zeros(vv.rows(), d);
                let mut dp = vec![0.0; layout.k_len];
                for b in 0..layout.batch {
                    for h in 0..layout.heads {
                        let c0 = h * dh;
                        let p = &probs[b * layout.heads + h];
                        for i in 0..layout.q_len {
                            let qi = b * layout.q_len + i;
                            let gi = &g.row(qi)[c0..c0 + dh];
                            // dP_ij = g_i · v_j ; dV_j += P_ij g_i
                            let mut dot_sum = 0.0;
                            for j in 0..layout.k_len {
                                let pij = p[(i, j)];
                                if pij == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let kj = b * layout.k_len + j;
                                let vj = &vv.row(kj)[c0..c0 + dh];
                                dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dot_sum += pij * dp[j];
                                let dvj = &mut dv.row_mut(kj)[c0..c0 + dh];
                                for (o, x) in dvj.iter_mut().zip(gi) {
                                    *o += pij * x;
                                }
                            }
                            for j in 0..layout.k_len {
                                let pij = p[(i, j)];
                                if pij == 0.0 {
                                    continue;
                                }
                                let ds = pij * (dp[j] - dot_sum) * scale;
                                let kj = b * layout.k_len + j;
                                {
                                    let krow = &kv.row(kj)[c0..c0 + dh];
                                    let dqi = &mut dq.row_mut(qi)[c0..c0 + dh];
                                    for (o, x) in dqi.iter_mut().zip(krow) {
                                        *o += ds * x;
                                    }
                                }
                                let qrow = &qv.row(qi)[c0..c0 + dh];
                                let dkj = &mut dk.row_mut(kj)[c0..c0 + dh];
                                for (o, x) in dkj.iter_mut().zip(qrow) {
                                    *o += ds * x;
                                }
                            }
                        }
                    }
                }
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::Lwta {
                pre,
                relaxed,
                units,
                temperature,
            } => {
                // y = pre ⊙ r, r = softmax((pre + g)/T) per block.
                let p = self.value(*pre);
                let mut d = Matrix::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let (pr, rr, gr) = (p.row(i), relaxed.row(i), g.row(i));
                    let dr = d.row_mut(i);
                    for blk in 0..pr.len() / units {
                        let s = blk * units..(blk + 1) * units;
                        let a: f64 = s.clone().map(|c| gr[c] * pr[c] * rr[c]).sum();
                        for c in s {
                            dr[c] = gr[c] * rr[c] + rr[c] * (gr[c] * pr[c] - a) / temperature;
                        }
                    }
                }
                acc(*pre, d);
            }
            Op::Pointwise { x, kind } => {
                let xv = self.value(*x);
                let d = g.zip_map(xv, |g, x| g * kind.derivative(x));
                acc(*x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                norm,
            } => {
                let up = g.item() / norm;
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (i, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        let dr = d.row_mut(i);
                        dr.copy_from_slice(probs.row(i));
                        dr[t] -= 1.0;
                        dr.iter_mut().for_each(|x| *x *= up);
                    }
                }
                acc(*logits, d);
            }
            Op::KlGaussian { mean, rho } => {
                let up = g.item();
                let m = self.value(*mean);
                acc(*mean, m.map(|x| x * up));
                if self.ng(*rho) {
                    let r = self.value(*rho);
                    let d = r.map(|r| {
                        let s = softplus(r);
                        let sig = sigmoid(r);
                        // d/dρ [½σ² − log σ] = (σ − 1/σ)·σ'(ρ)
                        let ratio = if r < -30.0 { 1.0 } else { sig / s };
                        up * (s * sig - ratio)
                    });
                    acc(*rho, d);
                }
            }
            Op::KlWinners {
                pre,
                units,
                row_weight,
                probs,
            } => {
                let up = g.item();
                let mut d = Matrix::zeros(probs.rows(), probs.cols());
                for (i, &w) in row_weight.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let pr = probs.row(i);
                    let dr = d.row_mut(i);
                    for blk in 0..pr.len() / units {
                        let s = blk * units..(blk + 1) * units;
                        let lp = |q: f64| if q > 0.0 { q.ln() } else { 0.0 };
                        let ent: f64 = s.clone().map(|c| pr[c] * lp(pr[c])).sum();
                        for c in s {
                            dr[c] = up * w * pr[c] * (lp(pr[c]) - ent);
                        }
                    }
                }
                acc(*pre, d);
            }
            Op::WeightedSum(terms) => {
                let up = g.item();
                for &(v, c) in terms {
                    acc(v, Matrix::scalar(up * c));
                }
            }
        }
    }
}
