//! A small reverse-mode tape over [`Matrix`] values.
//!
//! Every op appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Leaves can borrow
//! their value (model parameters) so binding a model onto a tape is free.

use std::borrow::Cow;

use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Softmax(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Nll {
        logits: NodeId,
        targets: Vec<Option<usize>>,
        weight: f64,
        probs: Matrix,
    },
}

struct Node<'a> {
    value: Cow<'a, Matrix>,
    op: Op,
    needs_grad: bool,
}

/// How per-token negative log-likelihoods are reduced to a scalar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    /// Average over non-ignored positions.
    Mean,
    Sum,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn ng(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// A leaf whose adjoint is tracked.
    pub fn param(&mut self, value: &'a Matrix) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param_owned(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant: no gradient flows into it.
    pub fn constant(&mut self, value: &'a Matrix) -> NodeId {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            op: Op::Leaf,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant_owned(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul_t(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    /// Adds a `1 × n` row vector to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        assert_eq!(b.cols(), self.value(a).cols(), "bias width mismatch");
        let mut v = self.value(a).clone();
        let brow = b.row(0).to_vec();
        for r in 0..v.rows() {
            for (x, bb) in v.row_mut(r).iter_mut().zip(&brow) {
                *x += bb;
            }
        }
        let ng = self.ng(a) || self.ng(bias);
        self.push(v, Op::AddRow(a, bias), ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// Rows of `table` selected by `ids`, in order.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let mut v = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            v.row_mut(r).copy_from_slice(t.row(id));
        }
        let ng = self.ng(table);
        self.push(
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let g = self.value(gain).row(0).to_vec();
        let b = self.value(bias).row(0).to_vec();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, h * g[c] + b[c]);
            }
        }
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    /// Row-wise softmax. Entries where `allowed` is false get probability
    /// exactly zero and receive no gradient; a fully masked row is all zero.
    pub fn masked_softmax(&mut self, x: NodeId, allowed: &[bool]) -> NodeId {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        assert_eq!(allowed.len(), rows * cols, "mask shape mismatch");
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mask = &allowed[r * cols..(r + 1) * cols];
            let mut m = f64::NEG_INFINITY;
            for c in 0..cols {
                if mask[c] {
                    m = m.max(row[c]);
                }
            }
            if m == f64::NEG_INFINITY {
                continue;
            }
            let mut z = 0.0;
            let orow = out.row_mut(r);
            for c in 0..cols {
                if mask[c] {
                    let e = (row[c] - m).exp();
                    orow[c] = e;
                    z += e;
                }
            }
            for c in 0..cols {
                if mask[c] {
                    orow[c] /= z;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let xv = self.value(x);
        let mut v = Matrix::zeros(xv.rows(), len);
        for r in 0..xv.rows() {
            v.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        self.push(v, Op::SliceCols { x, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`, as a `1 × 1` node. `None` targets are ignored.
    pub fn nll(&mut self, logits: NodeId, targets: &[Option<usize>], reduction: Reduction) -> NodeId {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        assert_eq!(rows, targets.len(), "nll target length mismatch");
        let count = targets.iter().filter(|t| t.is_some()).count();
        let weight = match reduction {
            Reduction::Sum => 1.0,
            Reduction::Mean if count == 0 => 0.0,
            Reduction::Mean => 1.0 / count as f64,
        };
        let mut probs = Matrix::zeros(rows, cols);
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(t) = *target else { continue };
            let row = lv.row(r);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - row[t];
            let prow = probs.row_mut(r);
            for c in 0..cols {
                prow[c] = (row[c] - lse).exp();
            }
        }
        let ng = self.ng(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![weight * total]),
            Op::Nll {
                logits,
                targets: targets.to_vec(),
                weight,
                probs,
            },
            ng,
        )
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!(v.shape(), (1, 1), "not a scalar node");
        v.get(0, 0)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.matmul_t(self.value(*b)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, self.value(*a).t_matmul(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.matmul(self.value(*b)));
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.t_matmul(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.ng(*bias) {
                        let mut gb = Matrix::zeros(1, g.cols());
                        for r in 0..g.rows() {
                            for (acc, v) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                                *acc += v;
                            }
                        }
                        accumulate(&mut grads, *bias, gb);
                    }
                    if self.ng(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Scale(a, s) => {
                    let mut ga = g.clone();
                    ga.scale(*s);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut gt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (acc, v) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let (rows, cols) = xhat.shape();
                    let gv = self.value(*gain).row(0);
                    if self.ng(*gain) || self.ng(*bias) {
                        let mut gg = Matrix::zeros(1, cols);
                        let mut gbias = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                                gbias.data_mut()[c] += g.get(r, c);
                            }
                        }
                        if self.ng(*gain) {
                            accumulate(&mut grads, *gain, gg);
                        }
                        if self.ng(*bias) {
                            accumulate(&mut grads, *bias, gbias);
                        }
                    }
                    if self.ng(*x) {
                        let mut gx = Matrix::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let mut mean_d = 0.0;
                            let mut mean_dx = 0.0;
                            for c in 0..cols {
                                let d = g.get(r, c) * gv[c];
                                mean_d += d;
                                mean_dx += d * xhat.get(r, c);
                            }
                            mean_d /= n;
                            mean_dx /= n;
                            for c in 0..cols {
                                let d = g.get(r, c) * gv[c];
                                gx.set(r, c, inv_std[r] * (d - mean_d - xhat.get(r, c) * mean_dx));
                            }
                        }
                        accumulate(&mut grads, *x, gx);
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (gi, &xi) in gx.data_mut().iter_mut().zip(xv.data()) {
                        *gi *= gelu_grad(xi);
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let (rows, cols) = p.shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let prow = p.row(r);
                        let grow = g.row(r);
                        let s: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        let out = gx.row_mut(r);
                        for c in 0..cols {
                            out[c] = prow[c] * (grow[c] - s);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.ng(p) {
                            let mut gp = Matrix::zeros(g.rows(), w);
                            for r in 0..g.rows() {
                                gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                            }
                            accumulate(&mut grads, p, gp);
                        }
                        off += w;
                    }
                }
                Op::Nll {
                    logits,
                    targets,
                    weight,
                    probs,
                } => {
                    let upstream = g.get(0, 0) * weight;
                    let mut gl = Matrix::zeros(probs.rows(), probs.cols());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let out = gl.row_mut(r);
                        for (o, &p) in out.iter_mut().zip(probs.row(r)) {
                            *o = upstream * p;
                        }
                        out[t] -= upstream;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Adjoints produced by [`Tape::backward`]. Only leaves keep theirs.
pub struct Grads {
    grads: Vec<Option<Matrix>>,
}

impl Grads {
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn numeric_grad(f: impl Fn(&Matrix) -> f64, x: &Matrix) -> Matrix {
        let eps = 1e-5;
        let mut g = Matrix::zeros(x.rows(), x.cols());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += eps;
            let mut minus = x.clone();
            minus.data_mut()[i] -= eps;
            g.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * eps);
        }
        g
    }

    fn close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    fn sample_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed;
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data)
    }

    #[test]
    fn composite_graph_gradients_match_central_differences() {
        let x = sample_matrix(3, 4, 1);
        let w = sample_matrix(4, 5, 2);
        let b = sample_matrix(1, 5, 3);
        let g = sample_matrix(1, 5, 4);
        let allowed: Vec<bool> = (0..15).map(|i| i % 7 != 3).collect();
        let targets = [Some(1), None, Some(4)];

        let run = |x: &Matrix, w: &Matrix| -> (f64, Option<(Matrix, Matrix)>) {
            let mut t = Tape::new();
            let xn = t.param(x);
            let wn = t.param(w);
            let bn = t.param(&b);
            let gn = t.param(&g);
            let h = t.matmul(xn, wn);
            let h = t.add_row(h, bn);
            let h = t.layer_norm(h, gn, bn);
            let h = t.gelu(h);
            let a = t.slice_cols(h, 1, 3);
            let c = t.slice_cols(h, 0, 2);
            let h2 = t.concat_cols(&[c, a]);
            let s = t.masked_softmax(h2, &allowed);
            let s = t.matmul_t(s, h2);
            let s = t.scale(s, 0.7);
            let s = t.add(s, s);
            let s2 = t.matmul(s, h2);
            let loss = t.nll(s2, &targets, Reduction::Mean);
            let mut grads = t.backward(loss);
            let gx = grads.take(xn).unwrap();
            let gw = grads.take(wn).unwrap();
            (t.scalar(loss), Some((gx, gw)))
        };

        let (_, grads) = run(&x, &w);
        let (gx, gw) = grads.unwrap();
        close(&gx, &numeric_grad(|xp| run(xp, &w).0, &x), 1e-7);
        close(&gw, &numeric_grad(|wp| run(&x, wp).0, &w), 1e-7);
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let table = sample_matrix(4, 3, 9);
        let mut t = Tape::new();
        let tn = t.param(&table);
        let rows = t.gather(tn, &[2, 0, 2]);
        let loss = t.nll(rows, &[Some(0), Some(1), Some(2)], Reduction::Sum);
        let grads = t.backward(loss);
        let gt = grads.get(tn).unwrap();
        assert!(gt.row(1).iter().all(|&v| v == 0.0));
        assert!(gt.row(3).iter().all(|&v| v == 0.0));
        let numeric = numeric_grad(
            |tp| {
                let mut t = Tape::new();
                let tn = t.constant(tp);
                let rows = t.gather(tn, &[2, 0, 2]);
                let loss = t.nll(rows, &[Some(0), Some(1), Some(2)], Reduction::Sum);
                t.scalar(loss)
            },
            &table,
        );
        close(gt, &numeric, 1e-7);
    }

    #[test]
    fn masked_softmax_zeroes_disallowed_entries() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, 0.5, 0.5]]);
        let mut t = Tape::new();
        let xn = t.constant(&x);
        let p = t.masked_softmax(xn, &[true, false, true, false, false, false]);
        let pv = t.value(p);
        assert_eq!(pv.get(0, 1), 0.0);
        assert!((pv.get(0, 0) + pv.get(0, 2) - 1.0).abs() < 1e-15);
        assert!(pv.row(1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let a = sample_matrix(2, 2, 5);
        let b = sample_matrix(2, 3, 6);
        let mut t = Tape::new();
        let an = t.constant(&a);
        let bn = t.param(&b);
        let y = t.matmul(an, bn);
        let loss = t.nll(y, &[Some(0), Some(2)], Reduction::Mean);
        let grads = t.backward(loss);
        assert!(grads.get(an).is_none());
        assert!(grads.get(bn).is_some());
    }
}
