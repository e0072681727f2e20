//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Only the operations the sequence networks and their losses need are
//! supported. Parameter leaves remember their offset in the flat parameter
//! vector so gradients land directly in a flat gradient buffer.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::math;

use super::matrix::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Matrix};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which keys a query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum AttentionScope {
    /// Keys at or before the query position.
    Causal,
    /// Only the query's own position.
    SelfOnly,
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param { offset: usize },
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    Square(Var),
    Sum(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, n_heads: usize, probs: Vec<Matrix> },
    GatherRows(Var, Vec<usize>),
    Interleave(Vec<Var>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(128) }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(m, Op::Input)
    }

    /// Trainable leaf copied from `params[offset..offset + rows * cols]`.
    pub fn param(&mut self, params: &[f64], offset: usize, rows: usize, cols: usize) -> Var {
        let data = params[offset..offset + rows * cols].to_vec();
        self.push(Matrix::from_vec(rows, cols, data), Op::Param { offset })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(av.rows, bv.cols);
        matmul_acc(av, bv, &mut out);
        self.push(out, Op::MatMul(a, b))
    }

    /// Broadcast-add a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!((rv.rows, rv.cols), (1, av.cols), "add_row shape mismatch");
        let mut out = av.clone();
        for i in 0..out.rows {
            for (o, r) in out.row_mut(i).iter_mut().zip(&rv.data) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.data.len(), self.value(b).data.len(), "add shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.data.len(), self.value(b).data.len(), "sub shape mismatch");
        for (o, x) in out.data.iter_mut().zip(&self.value(b).data) {
            *o -= x;
        }
        self.push(out, Op::Sub(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
        self.push(out, Op::Relu(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            *x *= c;
        }
        self.push(out, Op::Scale(a, c))
    }

    /// Elementwise product with constant weights.
    pub fn mul_const(&mut self, a: Var, weights: Vec<f64>) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.data.len(), weights.len(), "mul_const shape mismatch");
        for (x, w) in out.data.iter_mut().zip(&weights) {
            *x *= w;
        }
        self.push(out, Op::MulConst(a, weights))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for x in &mut out.data {
            *x *= *x;
        }
        self.push(out, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::scalar(s), Op::Sum(a))
    }

    /// Row-wise layer normalization with learned `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let n = xv.cols as f64;
        let mut xhat = Matrix::zeros(xv.rows, xv.cols);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = Matrix::zeros(xv.rows, xv.cols);
        for i in 0..xv.rows {
            let row = xv.row(i);
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let is = 1.0 / math::sqrt(var + LN_EPS);
            inv_std.push(is);
            let xh = xhat.row_mut(i);
            for j in 0..row.len() {
                xh[j] = (row[j] - mu) * is;
            }
            let o = out.row_mut(i);
            for j in 0..o.len() {
                o[j] = xh[j] * g[j] + b[j];
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention over `n x h` projections.
    ///
    /// Query `i` sees key `j` when the scope allows it and either
    /// `key_mask[j]` is set or `j == i`; masked probabilities are exactly 0.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, key_mask: &[bool], scope: AttentionScope) -> Var {
        let n = self.value(q).rows;
        self.attention_segmented(q, k, v, n_heads, key_mask, scope, n)
    }

    /// Attention applied independently to consecutive blocks of `segment`
    /// rows, so several sequences can share one pass.
    #[allow(clippy::too_many_arguments)]
    pub fn attention_segmented(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        key_mask: &[bool],
        scope: AttentionScope,
        segment: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let n = qv.rows;
        let h = qv.cols;
        assert!(segment > 0 && n % segment == 0, "{n} rows do not split into segments of {segment}");
        let dh = h / n_heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let mut out = Matrix::zeros(n, h);
        let mut probs = Vec::with_capacity(n_heads);
        for head in 0..n_heads {
            let c0 = head * dh;
            let mut p = Matrix::zeros(n, segment);
            for i in 0..n {
                let base = i - i % segment;
                let qi = &qv.row(i)[c0..c0 + dh];
                let allowed = |j: usize| match scope {
                    AttentionScope::Causal => j <= i && (key_mask[j] || j == i),
                    AttentionScope::SelfOnly => j == i,
                };
                let mut max = f64::NEG_INFINITY;
                let row = p.row_mut(i);
                for (jj, r) in row.iter_mut().enumerate() {
                    let j = base + jj;
                    if allowed(j) {
                        let kj = &kv.row(j)[c0..c0 + dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        *r = s;
                        if s > max {
                            max = s;
                        }
                    }
                }
                let mut z = 0.0;
                for (jj, r) in row.iter_mut().enumerate() {
                    if allowed(base + jj) {
                        let e = math::exp(*r - max);
                        *r = e;
                        z += e;
                    } else {
                        *r = 0.0;
                    }
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
                let o = &mut out.data[i * h + c0..i * h + c0 + dh];
                for jj in 0..segment {
                    let pij = p.data[i * segment + jj];
                    if pij != 0.0 {
                        let vj = &vv.row(base + jj)[c0..c0 + dh];
                        for (oo, vvv) in o.iter_mut().zip(vj) {
                            *oo += pij * vvv;
                        }
                    }
                }
            }
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, n_heads, probs })
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(idx.len(), av.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(i));
        }
        self.push(out, Op::GatherRows(a, idx))
    }

    /// Row `t * parts.len() + p` of the result is row `t` of `parts[p]`.
    pub fn interleave(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols = self.value(parts[0]).cols;
        let np = parts.len();
        let mut out = Matrix::zeros(rows * np, cols);
        for (p, v) in parts.iter().enumerate() {
            let pv = self.value(*v);
            assert_eq!((pv.rows, pv.cols), (rows, cols), "interleave shape mismatch");
            for t in 0..rows {
                out.row_mut(t * np + p).copy_from_slice(pv.row(t));
            }
        }
        self.push(out, Op::Interleave(parts))
    }

    /// Fingerprint of every ReLU's active set; finite differences are only
    /// valid between evaluations with equal fingerprints.
    pub fn relu_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(a) = node.op {
                for x in &self.nodes[a.0].value.data {
                    h ^= (*x > 0.0) as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Accumulate `d loss / d param` into `grad` (indexed like the flat
    /// parameter vector). `loss` must be a 1 x 1 node.
    pub fn backward(&self, loss: Var, grad: &mut [f64]) -> Result<()> {
        let lv = self.value(loss);
        contract!(lv.rows == 1 && lv.cols == 1, "loss must be scalar, got {}x{}", lv.rows, lv.cols);
        self.backward_from(loss, Matrix::scalar(1.0), grad)
    }

    /// Backpropagate an explicit upstream gradient `seed` for node `out`.
    pub fn backward_from(&self, out: Var, seed: Matrix, grad: &mut [f64]) -> Result<()> {
        let ov = self.value(out);
        contract!(
            seed.rows == ov.rows && seed.cols == ov.cols,
            "upstream gradient {}x{} does not match node {}x{}",
            seed.rows,
            seed.cols,
            ov.rows,
            ov.cols
        );
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param { offset } => {
                    for (dst, s) in grad[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                        *dst += s;
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows, av.cols);
                    matmul_nt_acc(&g, bv, &mut da);
                    let mut db = Matrix::zeros(bv.rows, bv.cols);
                    matmul_tn_acc(av, &g, &mut db);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::AddRow(a, row) => {
                    let mut dr = Matrix::zeros(1, g.cols);
                    for i in 0..g.rows {
                        for (d, x) in dr.data.iter_mut().zip(g.row(i)) {
                            *d += x;
                        }
                    }
                    accumulate(&mut grads, *row, dr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    let mut neg = g.clone();
                    for x in &mut neg.data {
                        *x = -*x;
                    }
                    accumulate(&mut grads, *b, neg);
                    accumulate(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let mut d = g;
                    for (x, inp) in d.data.iter_mut().zip(&self.value(*a).data) {
                        if *inp <= 0.0 {
                            *x = 0.0;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Scale(a, c) => {
                    let mut d = g;
                    for x in &mut d.data {
                        *x *= c;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::MulConst(a, w) => {
                    let mut d = g;
                    for (x, wi) in d.data.iter_mut().zip(w) {
                        *x *= wi;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Square(a) => {
                    let mut d = g;
                    for (x, inp) in d.data.iter_mut().zip(&self.value(*a).data) {
                        *x *= 2.0 * inp;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let s = g.data[0];
                    accumulate(&mut grads, *a, Matrix::from_vec(av.rows, av.cols, vec![s; av.data.len()]));
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = &self.value(*gamma).data;
                    let cols = g.cols;
                    let n = cols as f64;
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    let mut dx = Matrix::zeros(g.rows, cols);
                    for i in 0..g.rows {
                        let gr = g.row(i);
                        let xh = xhat.row(i);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..cols {
                            dg.data[j] += gr[j] * xh[j];
                            db.data[j] += gr[j];
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        let out = dx.row_mut(i);
                        for j in 0..cols {
                            let d = gr[j] * gv[j];
                            out[j] = inv_std[i] * (d - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *gamma, dg);
                    accumulate(&mut grads, *beta, db);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, n_heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let n = qv.rows;
                    let h = qv.cols;
                    let dh = h / n_heads;
                    let scale = 1.0 / math::sqrt(dh as f64);
                    let segment = probs[0].cols;
                    let mut dq = Matrix::zeros(n, h);
                    let mut dk = Matrix::zeros(n, h);
                    let mut dv = Matrix::zeros(n, h);
                    let mut dp_row = vec![0.0; segment];
                    for (head, p) in probs.iter().enumerate() {
                        let c0 = head * dh;
                        for i in 0..n {
                            let base = i - i % segment;
                            let go = &g.data[i * h + c0..i * h + c0 + dh];
                            let prow = p.row(i);
                            let mut dot = 0.0;
                            for jj in 0..segment {
                                let pij = prow[jj];
                                if pij == 0.0 {
                                    dp_row[jj] = 0.0;
                                    continue;
                                }
                                let j = base + jj;
                                let vj = &vv.row(j)[c0..c0 + dh];
                                let d: f64 = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                                dp_row[jj] = d;
                                dot += pij * d;
                                let dvj = &mut dv.data[j * h + c0..j * h + c0 + dh];
                                for (x, gg) in dvj.iter_mut().zip(go) {
                                    *x += pij * gg;
                                }
                            }
                            for jj in 0..segment {
                                let pij = prow[jj];
                                if pij == 0.0 {
                                    continue;
                                }
                                let j = base + jj;
                                let ds = pij * (dp_row[jj] - dot) * scale;
                                let kj = &kv.row(j)[c0..c0 + dh];
                                let qi = &qv.row(i)[c0..c0 + dh];
                                let dqi = &mut dq.data[i * h + c0..i * h + c0 + dh];
                                for (x, kk) in dqi.iter_mut().zip(kj) {
                                    *x += ds * kk;
                                }
                                let dkj = &mut dk.data[j * h + c0..j * h + c0 + dh];
                                for (x, qq) in dkj.iter_mut().zip(qi) {
                                    *x += ds * qq;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *q, dq);
                    accumulate(&mut grads, *k, dk);
                    accumulate(&mut grads, *v, dv);
                }
                Op::GatherRows(a, idx) => {
                    let av = self.value(*a);
                    let mut d = Matrix::zeros(av.rows, av.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (x, y) in d.row_mut(i).iter_mut().zip(g.row(r)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Interleave(parts) => {
                    let np = parts.len();
                    let rows = g.rows / np;
                    for (p, v) in parts.iter().enumerate() {
                        let mut d = Matrix::zeros(rows, g.cols);
                        for t in 0..rows {
                            d.row_mut(t).copy_from_slice(g.row(t * np + p));
                        }
                        accumulate(&mut grads, *v, d);
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, d: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&d),
        slot @ None => *slot = Some(d),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient_is_twice_params() {
        let params = vec![1.0, -2.0, 0.5, 3.0];
        let mut tape = Tape::new();
        let p = tape.param(&params, 0, 2, 2);
        let sq = tape.square(p);
        let loss = tape.sum(sq);
        let mut grad = vec![0.0; 4];
        tape.backward(loss, &mut grad).unwrap();
        assert_eq!(grad, vec![2.0, -4.0, 1.0, 6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let params = vec![1.0, 2.0];
        let mut tape = Tape::new();
        let _p = tape.param(&params, 0, 1, 2);
        let c = tape.input(Matrix::from_vec(1, 2, vec![3.0, 4.0]));
        let loss = tape.sum(c);
        let mut grad = vec![0.0; 2];
        tape.backward(loss, &mut grad).unwrap();
        assert_eq!(grad, vec![0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let params = vec![1.0, 2.0];
        let mut tape = Tape::new();
        let p = tape.param(&params, 0, 1, 2);
        let mut grad = vec![0.0; 2];
        assert!(tape.backward(p, &mut grad).is_err());
    }

    #[test]
    fn attention_two_tokens_by_hand() {
        // one head, d = 2: q = k = v = x
        let x = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.5, 1.0]);
        let mut tape = Tape::new();
        let q = tape.input(x.clone());
        let k = tape.input(x.clone());
        let v = tape.input(x);
        let out = tape.attention(q, k, v, 1, &[true, true], AttentionScope::Causal);
        let o = tape.value(out);
        // row 0 attends only to itself
        assert!((o.get(0, 0) - 1.0).abs() < 1e-12 && o.get(0, 1).abs() < 1e-12);
        // row 1: scores (q1.k0, q1.k1) / sqrt(2) = (0.5, 1.25) / sqrt(2)
        let s0 = 0.5 / 2f64.sqrt();
        let s1 = 1.25 / 2f64.sqrt();
        let w0 = s0.exp() / (s0.exp() + s1.exp());
        let w1 = 1.0 - w0;
        assert!((o.get(1, 0) - (w0 * 1.0 + w1 * 0.5)).abs() < 1e-12);
        assert!((o.get(1, 1) - (w0 * 0.0 + w1 * 1.0)).abs() < 1e-12);
    }
}
