//! The computation tape: primitives recorded in execution order, replayed in
//! reverse for gradients.
//!
//! Nodes are append-only, so insertion order is a topological order by
//! construction: every operation's inputs precede it. Values are immutable
//! once written; gradients live in a parallel arena so the backward pass can
//! read values while accumulating.
//!
//! Leaves registered with `requires_grad = false` (frozen parameters,
//! constants such as attention masks or noise draws) receive no gradient
//! accumulation at all, and no operation whose inputs are all frozen is
//! revisited during backward.

use super::{mm_acc, mm_at_acc, mm_tb_acc, Real, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-12;

/// Sentinel row index for `select_rows`: contributes a zero row and receives
/// no gradient. Used for positions exempt from position/segment embeddings.
pub const ZERO_ROW: usize = usize::MAX;

enum Op<T> {
    Leaf,
    /// `[m,k] @ [k,n]`
    MatMul { a: NodeId, b: NodeId },
    /// `[m,k] @ [n,k]^T -> [m,n]`
    MatMulTb { a: NodeId, b: NodeId },
    Transpose { a: NodeId },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    /// `[m,n] + [n]`, broadcast over rows.
    AddRow { a: NodeId, row: NodeId },
    Scale { a: NodeId, c: T },
    Gelu { a: NodeId },
    /// Per-row normalization, then affine by `gamma`/`beta` (`[n]` each).
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    /// Per-row softmax.
    Softmax { a: NodeId },
    /// Mean over rows of -log softmax(row)[target]. Zero rows -> loss 0.
    CrossEntropyMean { logits: NodeId, targets: Vec<usize> },
    /// Row gather; `ZERO_ROW` yields a zero row.
    SelectRows { a: NodeId, idx: Vec<usize> },
    SliceRows { a: NodeId, start: usize },
    SliceCols { a: NodeId, start: usize },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    Sum { a: NodeId },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Reverse-mode autodiff tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.grads.push(None);
        id
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].needs_grad)
    }

    /// Register a leaf tensor. Gradients accumulate into it only when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Leaf that never receives gradient (masks, noise, labels-as-data).
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn dims2(&self, id: NodeId) -> (usize, usize) {
        let t = &self.nodes[id].value;
        (t.rows(), t.cols())
    }

    // ---- primitives ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 {
            return Err(Error::Dimension {
                primitive: "matmul",
                detail: format!("inner axes differ: [{m},{k}] @ [{k2},{n}]"),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_acc(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, ng))
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::Dimension {
                primitive: "matmul_tb",
                detail: format!("inner axes differ: [{m},{k}] @ [{n},{k2}]^T"),
            });
        }
        let mut out = vec![T::zero(); m * n];
        mm_tb_acc(
            self.nodes[a].value.data(),
            self.nodes[b].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulTb { a, b }, ng))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        let src = self.nodes[a].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose { a }, ng))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Dimension {
                primitive: "add",
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            });
        }
        let out: Vec<T> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }, ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].value.shape() != self.nodes[b].value.shape() {
            return Err(Error::Dimension {
                primitive: "mul",
                detail: format!(
                    "{:?} vs {:?}",
                    self.nodes[a].value.shape(),
                    self.nodes[b].value.shape()
                ),
            });
        }
        let out: Vec<T> = self.nodes[a]
            .value
            .data()
            .iter()
            .zip(self.nodes[b].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let ng = self.any_needs_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, ng))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        let rn = self.nodes[row].value.numel();
        if rn != n {
            return Err(Error::Dimension {
                primitive: "add_row",
                detail: format!("matrix cols {n} vs row length {rn}"),
            });
        }
        let rv = self.nodes[row].value.data();
        let mut out = self.nodes[a].value.data().to_vec();
        for i in 0..m {
            for (o, &r) in out[i * n..(i + 1) * n].iter_mut().zip(rv) {
                *o += r;
            }
        }
        let shape = self.nodes[a].value.shape().to_vec();
        let ng = self.any_needs_grad(&[a, row]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow { a, row }, ng))
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> Result<NodeId> {
        let out: Vec<T> = self.nodes[a].value.data().iter().map(|&x| x * c).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { a, c }, ng))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        let out: Vec<T> = self.nodes[a].value.data().iter().map(|&x| gelu(x)).collect();
        let shape = self.nodes[a].value.shape().to_vec();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { a }, ng))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(x);
        if self.nodes[gamma].value.numel() != n || self.nodes[beta].value.numel() != n {
            return Err(Error::Dimension {
                primitive: "layer_norm",
                detail: format!(
                    "gamma/beta lengths {}/{} vs cols {n}",
                    self.nodes[gamma].value.numel(),
                    self.nodes[beta].value.numel()
                ),
            });
        }
        let eps = T::from_f64(LAYER_NORM_EPS);
        let xv = self.nodes[x].value.data();
        let gv = self.nodes[gamma].value.data();
        let bv = self.nodes[beta].value.data();
        let inv_n = T::from_f64(1.0 / n as f64);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                * inv_n;
            let inv_std = (var + eps).sqrt().recip();
            for j in 0..n {
                out[i * n + j] = (row[j] - mean) * inv_std * gv[j] + bv[j];
            }
        }
        let ng = self.any_needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm { x, gamma, beta },
            ng,
        ))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        let xv = self.nodes[a].value.data();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..n {
                let e = (row[j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            let inv = sum.recip();
            for o in &mut out[i * n..(i + 1) * n] {
                *o *= inv;
            }
        }
        let shape = self.nodes[a].value.shape().to_vec();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { a }, ng))
    }

    /// Mean negative log-likelihood over rows; `targets[i]` indexes into the
    /// columns of row `i`. An empty target list yields a loss of exactly 0.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.dims2(logits);
        if targets.len() != m {
            return Err(Error::Dimension {
                primitive: "cross_entropy",
                detail: format!("{m} logit rows vs {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Dimension {
                primitive: "cross_entropy",
                detail: format!("target {bad} out of range for {n} classes"),
            });
        }
        let xv = self.nodes[logits].value.data();
        let mut total = T::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = &xv[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
        }
        let loss = if targets.is_empty() {
            T::zero()
        } else {
            total / T::from_f64(targets.len() as f64)
        };
        let ng = self.nodes[logits].needs_grad;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMean { logits, targets },
            ng,
        ))
    }

    /// Gather rows of `a` (embedding lookup). `ZERO_ROW` entries contribute a
    /// zero row and are skipped on the backward scatter.
    pub fn select_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        if let Some(&bad) = idx.iter().find(|&&r| r != ZERO_ROW && r >= m) {
            return Err(Error::Dimension {
                primitive: "select_rows",
                detail: format!("row {bad} out of range for {m} rows"),
            });
        }
        let xv = self.nodes[a].value.data();
        let mut out = vec![T::zero(); idx.len() * n];
        for (i, &r) in idx.iter().enumerate() {
            if r != ZERO_ROW {
                out[i * n..(i + 1) * n].copy_from_slice(&xv[r * n..(r + 1) * n]);
            }
        }
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(
            Tensor::new(vec![idx.len(), n], out)?,
            Op::SelectRows { a, idx },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        if start + len > m {
            return Err(Error::Dimension {
                primitive: "slice_rows",
                detail: format!("rows {start}..{} out of range for {m}", start + len),
            });
        }
        let out = self.nodes[a].value.data()[start * n..(start + len) * n].to_vec();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Tensor::new(vec![len, n], out)?, Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (m, n) = self.dims2(a);
        if start + len > n {
            return Err(Error::Dimension {
                primitive: "slice_cols",
                detail: format!("cols {start}..{} out of range for {n}", start + len),
            });
        }
        let xv = self.nodes[a].value.data();
        let mut out = vec![T::zero(); m * len];
        for i in 0..m {
            out[i * len..(i + 1) * len].copy_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero parts"));
        }
        let n = self.dims2(parts[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let (pm, pn) = self.dims2(p);
            if pn != n {
                return Err(Error::Dimension {
                    primitive: "concat_rows",
                    detail: format!("column counts differ: {n} vs {pn}"),
                });
            }
            rows += pm;
            out.extend_from_slice(self.nodes[p].value.data());
        }
        let ng = self.any_needs_grad(&parts);
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows { parts }, ng))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero parts"));
        }
        let m = self.dims2(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims2(p).1).collect();
        for &p in &parts {
            if self.dims2(p).0 != m {
                return Err(Error::Dimension {
                    primitive: "concat_cols",
                    detail: format!("row counts differ: {m} vs {}", self.dims2(p).0),
                });
            }
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![T::zero(); m * n];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.nodes[p].value.data();
            for i in 0..m {
                out[i * n + offset..i * n + offset + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let ng = self.any_needs_grad(&parts);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::ConcatCols { parts }, ng))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = self.nodes[a].value.data().iter().copied().sum::<T>();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Tensor::scalar(total), Op::Sum { a }, ng))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate into every
    /// reachable node with `needs_grad`; frozen leaves stay untouched.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.nodes[loss].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        self.grads[loss] = Some(vec![T::one()]);
        for id in (0..self.nodes.len()).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(dout) = self.grads[id].clone() else {
                continue;
            };
            self.backward_op(id, &dout);
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let n = self.nodes[id].value.numel();
        debug_assert_eq!(delta.len(), n);
        match &mut self.grads[id] {
            Some(g) => {
                for (gv, &dv) in g.iter_mut().zip(delta) {
                    *gv += dv;
                }
            }
            None => self.grads[id] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&mut self, id: NodeId, dout: &[T]) {
        // Ops are cheap to re-derive from stored values; only index vectors
        // would be expensive to clone, so handle those variants with care.
        match &self.nodes[id].op {
            Op::Leaf => {}

            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).1;
                if self.nodes[a].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    mm_tb_acc(dout, self.nodes[b].value.data(), &mut da, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![T::zero(); k * n];
                    mm_at_acc(self.nodes[a].value.data(), dout, &mut db, m, k, n);
                    self.accumulate(b, &db);
                }
            }

            Op::MatMulTb { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).0;
                if self.nodes[a].needs_grad {
                    let mut da = vec![T::zero(); m * k];
                    mm_acc(dout, self.nodes[b].value.data(), &mut da, m, n, k);
                    self.accumulate(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let mut db = vec![T::zero(); n * k];
                    mm_at_acc(dout, self.nodes[a].value.data(), &mut db, m, n, k);
                    self.accumulate(b, &db);
                }
            }

            Op::Transpose { a } => {
                let a = *a;
                let (m, n) = self.dims2(a);
                let mut da = vec![T::zero(); m * n];
                for i in 0..n {
                    for j in 0..m {
                        da[j * n + i] = dout[i * m + j];
                    }
                }
                self.accumulate(a, &da);
            }

            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                self.accumulate(a, dout);
                self.accumulate(b, dout);
            }

            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a].needs_grad {
                    let da: Vec<T> = dout
                        .iter()
                        .zip(self.nodes[b].value.data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(a, &da);
                }
                if self.nodes[b].needs_grad {
                    let db: Vec<T> = dout
                        .iter()
                        .zip(self.nodes[a].value.data())
                        .map(|(&d, &v)| d * v)
                        .collect();
                    self.accumulate(b, &db);
                }
            }

            Op::AddRow { a, row } => {
                let (a, row) = (*a, *row);
                let (m, n) = self.dims2(a);
                self.accumulate(a, dout);
                if self.nodes[row].needs_grad {
                    let mut dr = vec![T::zero(); n];
                    for i in 0..m {
                        for (g, &d) in dr.iter_mut().zip(&dout[i * n..(i + 1) * n]) {
                            *g += d;
                        }
                    }
                    self.accumulate(row, &dr);
                }
            }

            Op::Scale { a, c } => {
                let (a, c) = (*a, *c);
                let da: Vec<T> = dout.iter().map(|&d| d * c).collect();
                self.accumulate(a, &da);
            }

            Op::Gelu { a } => {
                let a = *a;
                let da: Vec<T> = self.nodes[a]
                    .value
                    .data()
                    .iter()
                    .zip(dout)
                    .map(|(&x, &d)| d * gelu_grad(x))
                    .collect();
                self.accumulate(a, &da);
            }

            Op::LayerNorm { x, gamma, beta } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (m, n) = self.dims2(x);
                let eps = T::from_f64(LAYER_NORM_EPS);
                let inv_n = T::from_f64(1.0 / n as f64);
                let xv = self.nodes[x].value.data();
                let gv = self.nodes[gamma].value.data();
                let x_ng = self.nodes[x].needs_grad;
                let g_ng = self.nodes[gamma].needs_grad;
                let b_ng = self.nodes[beta].needs_grad;
                let mut dx = vec![T::zero(); m * n];
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let dout_row = &dout[i * n..(i + 1) * n];
                    let mean = row.iter().copied().sum::<T>() * inv_n;
                    let var = row
                        .iter()
                        .map(|&v| (v - mean) * (v - mean))
                        .sum::<T>()
                        * inv_n;
                    let inv_std = (var + eps).sqrt().recip();
                    // xhat_j = (x_j - mean) * inv_std
                    if g_ng || b_ng {
                        for j in 0..n {
                            let xhat = (row[j] - mean) * inv_std;
                            dgamma[j] += dout_row[j] * xhat;
                            dbeta[j] += dout_row[j];
                        }
                    }
                    if x_ng {
                        // dxhat = dout * gamma; standard layer-norm backward.
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..n {
                            let dxhat = dout_row[j] * gv[j];
                            let xhat = (row[j] - mean) * inv_std;
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xhat;
                        }
                        for j in 0..n {
                            let dxhat = dout_row[j] * gv[j];
                            let xhat = (row[j] - mean) * inv_std;
                            dx[i * n + j] = inv_std
                                * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat);
                        }
                    }
                }
                if x_ng {
                    self.accumulate(x, &dx);
                }
                if g_ng {
                    self.accumulate(gamma, &dgamma);
                }
                if b_ng {
                    self.accumulate(beta, &dbeta);
                }
            }

            Op::Softmax { a } => {
                let a = *a;
                let (m, n) = self.dims2(a);
                let yv = self.nodes[id].value.data();
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    let y_row = &yv[i * n..(i + 1) * n];
                    let d_row = &dout[i * n..(i + 1) * n];
                    let dot: T = y_row.iter().zip(d_row).map(|(&y, &d)| y * d).sum();
                    for j in 0..n {
                        da[i * n + j] = y_row[j] * (d_row[j] - dot);
                    }
                }
                self.accumulate(a, &da);
            }

            Op::CrossEntropyMean { logits, targets } => {
                let logits = *logits;
                if targets.is_empty() {
                    return;
                }
                let targets = targets.clone();
                let (m, n) = self.dims2(logits);
                let xv = self.nodes[logits].value.data();
                let scale = dout[0] / T::from_f64(m as f64);
                let mut dl = vec![T::zero(); m * n];
                for (i, &t) in targets.iter().enumerate() {
                    let row = &xv[i * n..(i + 1) * n];
                    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut sum = T::zero();
                    for j in 0..n {
                        let e = (row[j] - max).exp();
                        dl[i * n + j] = e;
                        sum += e;
                    }
                    let inv = sum.recip();
                    for j in 0..n {
                        dl[i * n + j] = dl[i * n + j] * inv * scale;
                    }
                    dl[i * n + t] -= scale;
                }
                self.accumulate(logits, &dl);
            }

            Op::SelectRows { a, idx } => {
                let a = *a;
                let idx = idx.clone();
                let (m, n) = self.dims2(a);
                let mut da = vec![T::zero(); m * n];
                for (i, &r) in idx.iter().enumerate() {
                    if r == ZERO_ROW {
                        continue;
                    }
                    for (g, &d) in da[r * n..(r + 1) * n]
                        .iter_mut()
                        .zip(&dout[i * n..(i + 1) * n])
                    {
                        *g += d;
                    }
                }
                self.accumulate(a, &da);
            }

            Op::SliceRows { a, start } => {
                let (a, start) = (*a, *start);
                let (m, n) = self.dims2(a);
                let mut da = vec![T::zero(); m * n];
                da[start * n..start * n + dout.len()].copy_from_slice(dout);
                self.accumulate(a, &da);
            }

            Op::SliceCols { a, start } => {
                let (a, start) = (*a, *start);
                let (m, n) = self.dims2(a);
                let w = self.nodes[id].value.cols();
                let mut da = vec![T::zero(); m * n];
                for i in 0..m {
                    da[i * n + start..i * n + start + w].copy_from_slice(&dout[i * w..(i + 1) * w]);
                }
                self.accumulate(a, &da);
            }

            Op::ConcatRows { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let numel = self.nodes[p].value.numel();
                    let slice = dout[offset..offset + numel].to_vec();
                    self.accumulate(p, &slice);
                    offset += numel;
                }
            }

            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let m = self.dims2(id).0;
                let n = self.dims2(id).1;
                let mut offset = 0;
                for p in parts {
                    let w = self.dims2(p).1;
                    let mut dp = vec![T::zero(); m * w];
                    for i in 0..m {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&dout[i * n + offset..i * n + offset + w]);
                    }
                    self.accumulate(p, &dp);
                    offset += w;
                }
            }

            Op::Sum { a } => {
                let a = *a;
                let da = vec![dout[0]; self.nodes[a].value.numel()];
                self.accumulate(a, &da);
            }
        }
    }
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    x * half * (T::one() + (x * inv_sqrt2).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    let cdf = half * (T::one() + (x * inv_sqrt2).erf());
    let pdf = inv_sqrt_2pi * (-(x * x) * half).exp();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), false);
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_fixes_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(0.0), false);
        let y = tape.gelu(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![1, 4]), false);
        for target in 0..4 {
            let loss = tape.cross_entropy_mean(logits, vec![target]).unwrap();
            assert!((tape.value(loss).item() - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_over_empty_targets_is_zero() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.leaf(Tensor::zeros(vec![0, 4]), true);
        let loss = tape.cross_entropy_mean(logits, vec![]).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
        tape.backward(loss).unwrap();
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(), true);
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_half_squared_norm_is_x() {
        // loss = 0.5 * ||x||^2 via mul + sum + scale
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![2.0, -1.0]).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let total = tape.sum(sq).unwrap();
        let loss = tape.scale(total, 0.5).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 2]), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, crate::Error::Contract(_)));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap(), true);
        let b = tape.leaf(Tensor::new(vec![2], vec![3.0, 4.0]).unwrap(), false);
        let s = tape.mul(a, b).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[3.0, 4.0]);
        assert!(tape.grad(b).is_none());
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(randn_tensor(&mut rng, vec![4, 16]), false);
        let gamma = tape.leaf(Tensor::new(vec![16], vec![1.0; 16]).unwrap(), false);
        let beta = tape.leaf(Tensor::zeros(vec![16]), false);
        let y = tape.layer_norm(x, gamma, beta).unwrap();
        let yv = tape.value(y).data();
        for i in 0..4 {
            let row = &yv[i * 16..(i + 1) * 16];
            let mean: f64 = row.iter().sum::<f64>() / 16.0;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5, "row {i} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "row {i} var {var}");
        }
    }

    #[test]
    fn mask_sentinel_selects_zero_row_and_skips_scatter() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(
            Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let picked = tape.select_rows(table, vec![1, ZERO_ROW, 0]).unwrap();
        assert_eq!(tape.value(picked).data(), &[3.0, 4.0, 0.0, 0.0, 1.0, 2.0]);
        let loss = tape.sum(picked).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn determinism_identical_graphs_produce_identical_bits() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::<f32>::new();
            let a = tape.leaf(
                {
                    let data: Vec<f32> = (0..12).map(|_| rng.gen::<f32>()).collect();
                    Tensor::new(vec![3, 4], data).unwrap()
                },
                true,
            );
            let b = tape.leaf(
                {
                    let data: Vec<f32> = (0..8).map(|_| rng.gen::<f32>()).collect();
                    Tensor::new(vec![4, 2], data).unwrap()
                },
                true,
            );
            let c = tape.matmul(a, b).unwrap();
            let s = tape.softmax(c).unwrap();
            let loss = tape.sum(s).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).item().to_bits(),
                tape.grad(a).unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            )
        };
        assert_eq!(build(), build());
    }

    // ---- finite-difference sweep over every primitive -------------------

    /// Gradient of `builder`'s scalar output w.r.t. its single input leaf,
    /// via the tape.
    fn tape_grad(
        builder: impl Fn(&mut Tape<f64>, NodeId) -> NodeId,
        x: &Tensor<f64>,
    ) -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let leaf = tape.leaf(x.clone(), true);
        let loss = builder(&mut tape, leaf);
        tape.backward(loss).unwrap();
        (
            tape.value(loss).item(),
            tape.grad(leaf).map(|g| g.to_vec()).unwrap_or_default(),
        )
    }

    fn check_primitive(
        name: &str,
        shape: Vec<usize>,
        builder: impl Fn(&mut Tape<f64>, NodeId) -> NodeId + Copy,
        tol: f64,
    ) {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = randn_tensor(&mut rng, shape.clone());
            let (_, analytic) = tape_grad(builder, &x);
            let err = finite_diff_check(
                |t: &Tensor<f64>| tape_grad(builder, t).0,
                &x,
                &analytic,
                1e-5,
            )
            .unwrap();
            assert!(err < tol, "{name} seed {seed}: max rel err {err}");
        }
    }

    // A scalar-valued composite on top of each primitive so the check is a
    // true function of all coordinates: weighted sum with fixed weights.
    fn weighted_sum(tape: &mut Tape<f64>, y: NodeId) -> NodeId {
        let n = tape.value(y).numel();
        let shape = tape.value(y).shape().to_vec();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.1 * (i as f64).sin()).collect();
        let wn = tape.constant(Tensor::new(shape, w).unwrap());
        let prod = tape.mul(y, wn).unwrap();
        tape.sum(prod).unwrap()
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        check_primitive(
            "matmul",
            vec![3, 4],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(1234);
                let b = tape.leaf(randn_tensor(&mut rng, vec![4, 5]), false);
                let y = tape.matmul(x, b).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive(
            "matmul_tb",
            vec![3, 4],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(77);
                let b = tape.leaf(randn_tensor(&mut rng, vec![5, 4]), false);
                let y = tape.matmul_tb(x, b).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive(
            "matmul_rhs",
            vec![4, 5],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(4321);
                let a = tape.leaf(randn_tensor(&mut rng, vec![3, 4]), false);
                let y = tape.matmul(a, x).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive(
            "add",
            vec![3, 3],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let b = tape.leaf(randn_tensor(&mut rng, vec![3, 3]), false);
                let y = tape.add(x, b).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive(
            "add_row",
            vec![5],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(6);
                let a = tape.leaf(randn_tensor(&mut rng, vec![4, 5]), false);
                let y = tape.add_row(a, x).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive("gelu", vec![4, 3], |tape, x| {
            let y = tape.gelu(x).unwrap();
            weighted_sum(tape, y)
        }, 1e-6);
        check_primitive("softmax", vec![3, 6], |tape, x| {
            let y = tape.softmax(x).unwrap();
            weighted_sum(tape, y)
        }, 1e-6);
        check_primitive(
            "layer_norm_x",
            vec![3, 8],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(8);
                let gamma = tape.leaf(randn_tensor(&mut rng, vec![8]), false);
                let beta = tape.leaf(randn_tensor(&mut rng, vec![8]), false);
                let y = tape.layer_norm(x, gamma, beta).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive(
            "layer_norm_gamma",
            vec![8],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(9);
                let xin = tape.leaf(randn_tensor(&mut rng, vec![3, 8]), false);
                let beta = tape.leaf(randn_tensor(&mut rng, vec![8]), false);
                let y = tape.layer_norm(xin, x, beta).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive(
            "cross_entropy",
            vec![4, 6],
            |tape, x| tape.cross_entropy_mean(x, vec![0, 3, 5, 2]).unwrap(),
            1e-6,
        );
        check_primitive(
            "select_rows",
            vec![5, 3],
            |tape, x| {
                let y = tape.select_rows(x, vec![2, 0, ZERO_ROW, 2]).unwrap();
                weighted_sum(tape, y)
            },
            1e-6,
        );
        check_primitive(
            "slices_and_concats",
            vec![4, 6],
            |tape, x| {
                let left = tape.slice_cols(x, 0, 3).unwrap();
                let right = tape.slice_cols(x, 3, 3).unwrap();
                let top = tape.slice_rows(x, 0, 2).unwrap();
                let swapped = tape.concat_cols(vec![right, left]).unwrap();
                let tall = tape.concat_rows(vec![swapped, top]).unwrap();
                let t = tape.transpose(tall).unwrap();
                weighted_sum(tape, t)
            },
            1e-6,
        );
        check_primitive(
            "softmax_cross_entropy_composite",
            vec![3, 5],
            |tape, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(11);
                let w = tape.leaf(randn_tensor(&mut rng, vec![5, 4]), false);
                let h = tape.matmul(x, w).unwrap();
                let g = tape.gelu(h).unwrap();
                tape.cross_entropy_mean(g, vec![1, 0, 3]).unwrap()
            },
            1e-6,
        );
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            crate::Error::Dimension { primitive, detail } => {
                assert_eq!(primitive, "matmul");
                assert!(detail.contains('3') && detail.contains('2'));
            }
            other => panic!("expected dimension error, got {other}"),
        }
    }
}
