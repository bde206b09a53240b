//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse and returns exact gradients for every tracked
//! parameter leaf. Values are immutable once produced and all reductions run
//! in a fixed order, so results are bit-reproducible.

use std::collections::BTreeMap;

use super::{Element, Tensor};
use crate::error::{Result, TglError};

/// Identity of a parameter across forward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Gradients keyed by parameter identity. A missing key means the parameter
/// did not participate in the loss.
#[derive(Debug, Clone, Default)]
pub struct GradMap<T: Element> {
    entries: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Element> GradMap<T> {
    pub fn new() -> Self {
        GradMap {
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.entries.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<T>) {
        self.entries.insert(id, grad);
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.entries.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (*k, v))
    }

    /// Accumulate `other * scale` into self, inserting missing keys.
    pub fn add_scaled(&mut self, other: &GradMap<T>, scale: T) {
        for (id, g) in other.iter() {
            match self.entries.get_mut(&id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a = *b * scale + *a;
                    }
                }
                None => {
                    let mut t = g.clone();
                    for v in t.data_mut() {
                        *v = *v * scale;
                    }
                    self.entries.insert(id, t);
                }
            }
        }
    }

    pub fn scale(&mut self, c: T) {
        for g in self.entries.values_mut() {
            for v in g.data_mut() {
                *v = *v * c;
            }
        }
    }
}

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Large negative logit used to zero out attention to future positions.
/// exp(x - rowmax) underflows to exactly 0.0 for this magnitude in both f32
/// and f64, which is what makes causal masking exact rather than approximate.
const MASK_VALUE: f64 = -1.0e9;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    CausalMask(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    },
    Gather {
        table: NodeId,
        ids: Vec<usize>,
    },
    SliceCols {
        x: NodeId,
        start: usize,
        end: usize,
    },
    ConcatCols(Vec<NodeId>),
    Sum(NodeId),
    CrossEntropyMasked {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// One forward pass worth of recorded operations.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Insert a value as a leaf; tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Insert a parameter leaf. Gradients for tracked parameter leaves are
    /// collected into the [`GradMap`] under `id`.
    pub fn param_leaf(&mut self, id: ParamId, tensor: Tensor<T>, tracked: bool) -> NodeId {
        let node = self.push(tensor, Op::Leaf, tracked);
        self.nodes[node.0].param = Some(id);
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    /// `x[m,n] + bias[n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let n = tx.cols();
        if tb.shape() != [n] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(n) {
            for (j, &v) in row.iter().enumerate() {
                data.push(v + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(value, Op::AddBias(x, bias), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("sub", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let cc = T::from_f64(c);
        let data = tx.data().iter().map(|&v| v * cc).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Scale(x, c), ng))
    }

    /// `a[m,k] @ b[k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::ZERO; m * n];
        mm_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a[m,k] @ b[n,k]^T -> [m,n]`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let mut out = vec![T::ZERO; m * n];
        mm_nt(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMulNT(a, b), ng))
    }

    /// Tanh-approximated GELU, the GPT-2 activation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Gelu(x), ng))
    }

    /// Softmax along the last axis, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let n = tx.cols();
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(n) {
            let mut max = row[0];
            for &v in row {
                if v > max {
                    max = v;
                }
            }
            let mut sum = T::ZERO;
            let base = data.len();
            for &v in row {
                let e = (v - max).exp();
                data.push(e);
                sum += e;
            }
            for v in &mut data[base..] {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows(x), ng))
    }

    /// Add a large negative constant to entries above the diagonal of a
    /// square score matrix so softmax sends them to exactly zero.
    pub fn causal_mask(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if tx.shape().len() != 2 || tx.shape()[0] != tx.shape()[1] {
            return Err(TglError::input(format!(
                "causal_mask needs a square matrix, got {:?}",
                tx.shape()
            )));
        }
        let t = tx.shape()[0];
        let mask = T::from_f64(MASK_VALUE);
        let mut data = tx.data().to_vec();
        for i in 0..t {
            for v in &mut data[i * t + i + 1..(i + 1) * t] {
                *v = *v + mask;
            }
        }
        let value = Tensor::new(vec![t, t], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::CausalMask(x), ng))
    }

    /// Per-row layer normalization (population variance) with affine output.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (tx, tg, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
        );
        let n = tx.cols();
        if tg.shape() != [n] {
            return Err(shape_err("layer_norm gamma", tx, tg));
        }
        if tb.shape() != [n] {
            return Err(shape_err("layer_norm beta", tx, tb));
        }
        let mut data = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks_exact(n) {
            let (mean, inv_std) = row_moments(row, eps);
            for (j, &v) in row.iter().enumerate() {
                let xhat = (v - mean) * inv_std;
                data.push(xhat * tg.data()[j] + tb.data()[j]);
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }, ng))
    }

    /// Gather rows of `table[v,d]` by index -> `[ids.len(), d]`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].value;
        if tt.shape().len() != 2 {
            return Err(TglError::input(format!(
                "gather needs a rank-2 table, got {:?}",
                tt.shape()
            )));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TglError::input(format!(
                "gather index {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], data)?;
        let ng = self.needs(table);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let n = tx.cols();
        if start >= end || end > n {
            return Err(TglError::input(format!(
                "slice_cols [{start},{end}) out of range for {n} columns"
            )));
        }
        let m = tx.rows();
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for row in tx.data().chunks_exact(n) {
            data.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![m, w], data)?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::SliceCols { x, start, end }, ng))
    }

    /// Concatenate rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TglError::input("concat_cols of zero parts".to_string()));
        }
        let m = self.nodes[parts[0].0].value.rows();
        let mut total = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            if tp.rows() != m {
                return Err(TglError::input(format!(
                    "concat_cols row mismatch: {m} vs {}",
                    tp.rows()
                )));
            }
            total += tp.cols();
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                let tp = &self.nodes[p.0].value;
                let w = tp.cols();
                data.extend_from_slice(&tp.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![m, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Sum of all elements -> scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let mut s = T::ZERO;
        for &v in tx.data() {
            s += v;
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    /// Mean negative log-likelihood of `targets` under `logits[t,v]` over
    /// unmasked positions; natural log.
    pub fn cross_entropy_masked(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        let tl = &self.nodes[logits.0].value;
        if tl.shape().len() != 2 {
            return Err(TglError::input(format!(
                "cross_entropy_masked needs rank-2 logits, got {:?}",
                tl.shape()
            )));
        }
        let (t, v) = (tl.shape()[0], tl.shape()[1]);
        if targets.len() != t || mask.len() != t {
            return Err(TglError::input(format!(
                "targets/mask length {}/{} does not match {t} logit rows",
                targets.len(),
                mask.len()
            )));
        }
        let n_active = mask.iter().filter(|&&m| m).count();
        if n_active == 0 {
            return Err(TglError::input(
                "cross_entropy_masked: empty mask".to_string(),
            ));
        }
        let mut total = 0.0f64;
        for (i, row) in tl.data().chunks_exact(v).enumerate() {
            if !mask[i] {
                continue;
            }
            let target = targets[i];
            if target >= v {
                return Err(TglError::input(format!(
                    "target id {target} out of range for vocab {v}"
                )));
            }
            total += row_nll(row, target);
        }
        let loss = T::from_f64(total / n_active as f64);
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar loss; returns gradients of every tracked
    /// parameter leaf that participated in it.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap<T>> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TglError::input(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.propagate(i, &g, &mut grads);
            // Leaves keep their gradient for collection below.
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut map = GradMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, grads[i].take()) {
                let tensor = Tensor::new(node.value.shape().to_vec(), g)?;
                match map.entries.get_mut(&pid) {
                    // Same parameter injected as several leaves: sum.
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(tensor.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        map.insert(pid, tensor);
                    }
                }
            }
        }
        Ok(map)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, add: impl FnOnce(&mut [T])) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(vec![T::ZERO; self.nodes[id.0].value.numel()]);
        }
        add(slot.as_mut().unwrap());
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |acc| {
                    for (x, &y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (x, &y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                self.accumulate(grads, *x, |acc| {
                    for (a, &y) in acc.iter_mut().zip(g) {
                        *a += y;
                    }
                });
                let n = self.nodes[bias.0].value.numel();
                self.accumulate(grads, *bias, |acc| {
                    for row in g.chunks_exact(n) {
                        for (a, &y) in acc.iter_mut().zip(row) {
                            *a += y;
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |acc| {
                    for (x, &y) in acc.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                self.accumulate(grads, *b, |acc| {
                    for (x, &y) in acc.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let vb = self.nodes[b.0].value.data();
                self.accumulate(grads, *a, |acc| {
                    for ((x, &y), &v) in acc.iter_mut().zip(g).zip(vb) {
                        *x = y * v + *x;
                    }
                });
                let va = self.nodes[a.0].value.data();
                self.accumulate(grads, *b, |acc| {
                    for ((x, &y), &v) in acc.iter_mut().zip(g).zip(va) {
                        *x = y * v + *x;
                    }
                });
            }
            Op::Scale(x, c) => {
                let cc = T::from_f64(*c);
                self.accumulate(grads, *x, |acc| {
                    for (a, &y) in acc.iter_mut().zip(g) {
                        *a = y * cc + *a;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA += dC @ B^T
                self.accumulate(grads, *a, |acc| {
                    mm_nt(g, tb.data(), m, n, k, acc);
                });
                // dB += A^T @ dC
                self.accumulate(grads, *b, |acc| {
                    mm_tn(ta.data(), g, m, k, n, acc);
                });
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                // C = A @ B^T: dA += dC @ B; dB += dC^T @ A
                self.accumulate(grads, *a, |acc| {
                    mm_nn(g, tb.data(), m, n, k, acc);
                });
                self.accumulate(grads, *b, |acc| {
                    mm_tn(g, ta.data(), m, n, k, acc);
                });
            }
            Op::Gelu(x) => {
                let vx = self.nodes[x.0].value.data();
                self.accumulate(grads, *x, |acc| {
                    for ((a, &y), &v) in acc.iter_mut().zip(g).zip(vx) {
                        *a = y * gelu_bwd(v) + *a;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let p = self.nodes[idx].value.data();
                let n = self.nodes[idx].value.cols();
                self.accumulate(grads, *x, |acc| {
                    for ((arow, grow), prow) in acc
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(p.chunks_exact(n))
                    {
                        let mut dot = T::ZERO;
                        for (&gy, &pv) in grow.iter().zip(prow) {
                            dot = gy * pv + dot;
                        }
                        for ((a, &gy), &pv) in arow.iter_mut().zip(grow).zip(prow) {
                            *a = (pv * (gy - dot)) + *a;
                        }
                    }
                });
            }
            Op::CausalMask(x) => {
                // Adding a constant: gradient passes through unchanged.
                self.accumulate(grads, *x, |acc| {
                    for (a, &y) in acc.iter_mut().zip(g) {
                        *a += y;
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let tx = &self.nodes[x.0].value;
                let tg = &self.nodes[gamma.0].value;
                let n = tx.cols();
                let inv_n = T::from_f64(1.0 / n as f64);
                self.accumulate(grads, *x, |acc| {
                    for (row_idx, (arow, grow)) in acc
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .enumerate()
                    {
                        let row = &tx.data()[row_idx * n..(row_idx + 1) * n];
                        let (mean, inv_std) = row_moments(row, *eps);
                        let mut sum_dxhat = T::ZERO;
                        let mut sum_dxhat_xhat = T::ZERO;
                        for (j, (&gy, &v)) in grow.iter().zip(row).enumerate() {
                            let xhat = (v - mean) * inv_std;
                            let dxhat = gy * tg.data()[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat = dxhat * xhat + sum_dxhat_xhat;
                        }
                        let m1 = sum_dxhat * inv_n;
                        let m2 = sum_dxhat_xhat * inv_n;
                        for (j, (a, (&gy, &v))) in
                            arow.iter_mut().zip(grow.iter().zip(row)).enumerate()
                        {
                            let xhat = (v - mean) * inv_std;
                            let dxhat = gy * tg.data()[j];
                            *a = ((dxhat - m1 - xhat * m2) * inv_std) + *a;
                        }
                    }
                });
                self.accumulate(grads, *gamma, |acc| {
                    for (row_idx, grow) in g.chunks_exact(n).enumerate() {
                        let row = &tx.data()[row_idx * n..(row_idx + 1) * n];
                        let (mean, inv_std) = row_moments(row, *eps);
                        for (j, (&gy, &v)) in grow.iter().zip(row).enumerate() {
                            let xhat = (v - mean) * inv_std;
                            acc[j] = gy * xhat + acc[j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |acc| {
                    for grow in g.chunks_exact(n) {
                        for (a, &gy) in acc.iter_mut().zip(grow) {
                            *a += gy;
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = self.nodes[idx].value.cols();
                self.accumulate(grads, *table, |acc| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut acc[id * d..(id + 1) * d];
                        for (a, &y) in dst.iter_mut().zip(src) {
                            *a += y;
                        }
                    }
                });
            }
            Op::SliceCols { x, start, end } => {
                let n = self.nodes[x.0].value.cols();
                let w = end - start;
                self.accumulate(grads, *x, |acc| {
                    for (arow, grow) in acc.chunks_exact_mut(n).zip(g.chunks_exact(w)) {
                        for (a, &y) in arow[*start..*end].iter_mut().zip(grow) {
                            *a += y;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = self.nodes[idx].value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p.0].value.cols();
                    let m = self.nodes[p.0].value.rows();
                    self.accumulate(grads, p, |acc| {
                        for i in 0..m {
                            let src = &g[i * total + offset..i * total + offset + w];
                            let dst = &mut acc[i * w..(i + 1) * w];
                            for (a, &y) in dst.iter_mut().zip(src) {
                                *a += y;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::Sum(x) => {
                let gy = g[0];
                self.accumulate(grads, *x, |acc| {
                    for a in acc.iter_mut() {
                        *a += gy;
                    }
                });
            }
            Op::CrossEntropyMasked {
                logits,
                targets,
                mask,
            } => {
                let tl = &self.nodes[logits.0].value;
                let v = tl.cols();
                let n_active = mask.iter().filter(|&&m| m).count();
                let scale = g[0] * T::from_f64(1.0 / n_active as f64);
                self.accumulate(grads, *logits, |acc| {
                    for (i, (arow, row)) in acc
                        .chunks_exact_mut(v)
                        .zip(tl.data().chunks_exact(v))
                        .enumerate()
                    {
                        if !mask[i] {
                            continue;
                        }
                        // d/dlogits of -log softmax[target] = p - onehot
                        let mut max = row[0];
                        for &x in row {
                            if x > max {
                                max = x;
                            }
                        }
                        let mut sum = T::ZERO;
                        for &x in row {
                            sum += (x - max).exp();
                        }
                        for (j, (a, &x)) in arow.iter_mut().zip(row).enumerate() {
                            let mut p = (x - max).exp() / sum;
                            if j == targets[i] {
                                p = p - T::ONE;
                            }
                            *a = p * scale + *a;
                        }
                    }
                });
            }
        }
    }
}

fn shape_err<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TglError {
    TglError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn row_moments<T: Element>(row: &[T], eps: f64) -> (T, T) {
    let n = T::from_f64(row.len() as f64);
    let mut mean = T::ZERO;
    for &v in row {
        mean += v;
    }
    mean = mean / n;
    let mut var = T::ZERO;
    for &v in row {
        let d = v - mean;
        var = d * d + var;
    }
    var = var / n;
    (mean, T::ONE / (var + T::from_f64(eps)).sqrt())
}

/// -log softmax(row)[target], accumulated in f64.
fn row_nll<T: Element>(row: &[T], target: usize) -> f64 {
    let mut max = row[0].to_f64();
    for &v in row {
        let x = v.to_f64();
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0f64;
    for &v in row {
        sum += (v.to_f64() - max).exp();
    }
    (max + sum.ln()) - row[target].to_f64()
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[inline]
fn gelu_fwd<T: Element>(x: T) -> T {
    let k = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let inner = k * (x + c * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

#[inline]
fn gelu_bwd<T: Element>(x: T) -> T {
    let k = T::from_f64(SQRT_2_OVER_PI);
    let c = T::from_f64(GELU_COEF);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * k * (T::ONE + three * c * x * x)
}

/// C[m,n] += A[m,k] @ B[k,n]
pub(crate) fn mm_nn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av * bv + *cv;
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T
pub(crate) fn mm_nt<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Dot product with eight independent accumulators. The fixed lane layout
/// keeps results reproducible while breaking the serial dependency that
/// would otherwise stop vectorization.
#[inline]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    const LANES: usize = 8;
    let mut acc = [T::ZERO; LANES];
    let chunks = a.len() / LANES;
    for i in 0..chunks {
        let av = &a[i * LANES..(i + 1) * LANES];
        let bv = &b[i * LANES..(i + 1) * LANES];
        for l in 0..LANES {
            acc[l] = av[l] * bv[l] + acc[l];
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * LANES..a.len() {
        tail = a[i] * b[i] + tail;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    ((s01 + s23) + (s45 + s67)) + tail
}

/// C[k,n] += A[m,k]^T @ B[m,n]
pub(crate) fn mm_tn<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = av * bv + *cv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], data).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i2 = g.leaf(t2(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let a = g.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_known_product() {
        let mut g = Graph::new();
        let a = g.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = g.leaf(t2(2, 2, vec![5.0, 6.0, 7.0, 8.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let z = g.leaf(t2(2, 2, vec![0.0; 4]));
        let a = g.leaf(t2(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let c = g.matmul(z, a).unwrap();
        assert_eq!(g.value(c).data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(t2(2, 3, vec![0.0; 6]));
        let b = g.leaf(t2(2, 2, vec![0.0; 4]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0f64, 0.0]));
        let p = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_two_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![2.0f64.ln(), 0.0]));
        let p = g.softmax_rows(x).unwrap();
        assert!(close(g.value(p).data()[0], 2.0 / 3.0, 1e-12));
        assert!(close(g.value(p).data()[1], 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn softmax_no_overflow() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1000.0f64, 0.0]));
        let p = g.softmax_rows(x).unwrap();
        assert!(g.value(p).all_finite());
        assert!(close(g.value(p).data()[0], 1.0, 1e-12));
        assert!(close(g.value(p).data()[1], 0.0, 1e-12));
    }

    #[test]
    fn layernorm_known_row() {
        let mut g = Graph::new();
        let x = g.leaf(t2(1, 3, vec![1.0, 2.0, 3.0]));
        let gamma = g.leaf(Tensor::from_vec(vec![1.0; 3]));
        let beta = g.leaf(Tensor::from_vec(vec![0.0; 3]));
        let y = g.layer_norm(x, gamma, beta, 0.0).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (got, want) in g.value(y).data().iter().zip(want) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn layernorm_constant_row_is_beta() {
        let mut g = Graph::new();
        let x = g.leaf(t2(1, 4, vec![7.0; 4]));
        let gamma = g.leaf(Tensor::from_vec(vec![1.0; 4]));
        let beta = g.leaf(Tensor::from_vec(vec![0.0; 4]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0; 4]);
    }

    #[test]
    fn layernorm_zero_gamma_gives_beta() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 3, vec![1.0, 5.0, -2.0, 0.5, 0.1, 9.0]));
        let gamma = g.leaf(Tensor::from_vec(vec![0.0; 3]));
        let beta = g.leaf(Tensor::from_vec(vec![4.0, 5.0, 6.0]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn gelu_values() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![0.0f64, 1.0, -10.0]));
        let y = g.gelu(x).unwrap();
        let got = g.value(y).data();
        assert_eq!(got[0], 0.0);
        assert!(close(got[1], 0.8411919906082768, 1e-12));
        assert!(got[2].abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut g = Graph::new();
        let logits = g.leaf(t2(2, 4, vec![0.0; 8]));
        let loss = g
            .cross_entropy_masked(logits, &[1, 3], &[true, true])
            .unwrap();
        assert!(close(g.value(loss).scalar_value(), 4.0f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let mut g = Graph::new();
        // Huge margin on the target makes p(target) == 1 after the exp.
        let logits = g.leaf(t2(1, 3, vec![100.0, 0.0, 0.0]));
        let loss = g.cross_entropy_masked(logits, &[0], &[true]).unwrap();
        assert!(g.value(loss).scalar_value().abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_mixed_probs() {
        // Two rows with p(target) = 0.5 and 0.125: mean NLL = (ln2 + ln8)/2 = ln4.
        let p1 = vec![0.5f64.ln(), 0.5f64.ln()];
        let p2 = vec![0.125f64.ln(), (1.0f64 - 0.125).ln()];
        let mut g = Graph::new();
        let logits = g.leaf(t2(2, 2, [p1, p2].concat()));
        let loss = g
            .cross_entropy_masked(logits, &[0, 0], &[true, true])
            .unwrap();
        assert!(close(g.value(loss).scalar_value(), 4.0f64.ln(), 1e-12));
    }

    #[test]
    fn cross_entropy_empty_mask_is_error() {
        let mut g = Graph::new();
        let logits = g.leaf(t2(2, 2, vec![0.0; 4]));
        assert!(g
            .cross_entropy_masked(logits, &[0, 0], &[false, false])
            .is_err());
    }

    #[test]
    fn cross_entropy_mask_ignores_masked_rows() {
        let mut g = Graph::new();
        let logits = g.leaf(t2(2, 2, vec![0.0, 0.0, 50.0, -50.0]));
        let loss = g
            .cross_entropy_masked(logits, &[0, 1], &[true, false])
            .unwrap();
        assert!(close(g.value(loss).scalar_value(), 2.0f64.ln(), 1e-12));
    }

    #[test]
    fn backward_square() {
        // loss = sum(x * x) at x = [3] -> dloss/dx = 6
        let mut g = Graph::new();
        let x = g.param_leaf(ParamId(0), Tensor::from_vec(vec![3.0f64]).with_grad(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_skips_nonparticipating_params() {
        let mut g = Graph::new();
        let x = g.param_leaf(ParamId(0), Tensor::from_vec(vec![3.0f64]).with_grad(), true);
        let _unused = g.param_leaf(ParamId(1), Tensor::from_vec(vec![5.0f64]).with_grad(), true);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.contains(ParamId(0)));
        assert!(!grads.contains(ParamId(1)));
    }

    #[test]
    fn backward_rejects_nonscalar_loss() {
        let mut g = Graph::new();
        let x = g.param_leaf(ParamId(0), Tensor::from_vec(vec![1.0f64, 2.0]).with_grad(), true);
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn backward_tied_leaf_usage_accumulates() {
        // One parameter used twice: loss = sum(x*x) + sum(x) -> grad 2x + 1.
        let mut g = Graph::new();
        let x = g.param_leaf(ParamId(0), Tensor::from_vec(vec![4.0f64]).with_grad(), true);
        let sq = g.mul(x, x).unwrap();
        let s1 = g.sum(sq).unwrap();
        let s2 = g.sum(x).unwrap();
        let loss = g.add(s1, s2).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[9.0]);
    }

    #[test]
    fn causal_mask_zeroes_future_probabilities() {
        let mut g = Graph::new();
        let scores = g.leaf(t2(3, 3, vec![1.0; 9]));
        let masked = g.causal_mask(scores).unwrap();
        let p = g.softmax_rows(masked).unwrap();
        let v = g.value(p);
        assert_eq!(v.at2(0, 1), 0.0);
        assert_eq!(v.at2(0, 2), 0.0);
        assert_eq!(v.at2(1, 2), 0.0);
        assert_eq!(v.at2(0, 0), 1.0);
        assert!(close(v.at2(2, 0), 1.0 / 3.0, 1e-12));
    }

    #[test]
    fn slice_concat_roundtrip() {
        let mut g = Graph::new();
        let x = g.leaf(t2(2, 4, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]));
        let a = g.slice_cols(x, 0, 2).unwrap();
        let b = g.slice_cols(x, 2, 4).unwrap();
        let y = g.concat_cols(&[a, b]).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn grad_check_quadratic() {
        // loss = sum(x*x) + sum(x*y): smooth, so FD error is tiny.
        let mut params = vec![
            Tensor::from_vec(vec![1.5f64, -2.0, 0.3]),
            Tensor::from_vec(vec![0.7f64, 0.1, -1.1]),
        ];
        let err = crate::tensor::grad_check(
            &mut params,
            |g, ids| {
                let sq = g.mul(ids[0], ids[0])?;
                let xy = g.mul(ids[0], ids[1])?;
                let s1 = g.sum(sq)?;
                let s2 = g.sum(xy)?;
                g.add(s1, s2)
            },
            1e-5,
            16,
            0,
        )
        .unwrap();
        assert!(err < 1e-8, "relative error {err}");
    }

    #[test]
    fn grad_check_constant_loss() {
        let mut params = vec![Tensor::from_vec(vec![1.0f64, 2.0])];
        let err = crate::tensor::grad_check(
            &mut params,
            |g, _ids| {
                let c = g.leaf(Tensor::scalar(5.0f64));
                g.scale(c, 1.0)
            },
            1e-5,
            8,
            0,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_all_ops_composed() {
        // One loss touching every op the model uses.
        let mut params = vec![
            t2(3, 4, vec![0.3, -0.2, 0.5, 0.1, 0.9, -0.4, 0.2, 0.8, -0.7, 0.6, -0.1, 0.4]),
            t2(4, 4, vec![0.1; 16]),
            Tensor::from_vec(vec![0.05f64, -0.03, 0.02, 0.01]),
            Tensor::from_vec(vec![1.1f64, 0.9, 1.0, 1.05]),
            Tensor::from_vec(vec![0.01f64, -0.02, 0.0, 0.03]),
        ];
        // Perturb the weight matrix a bit so gradients are not symmetric.
        for (i, v) in params[1].data_mut().iter_mut().enumerate() {
            *v += (i as f64) * 0.013 - 0.05;
        }
        let err = crate::tensor::grad_check(
            &mut params,
            |g, ids| {
                let table = ids[0];
                let w = ids[1];
                let b = ids[2];
                let gamma = ids[3];
                let beta = ids[4];
                let x = g.gather(table, &[0, 2, 1, 2])?;
                let h = g.matmul(x, w)?;
                let h = g.add_bias(h, b)?;
                let h = g.layer_norm(h, gamma, beta, 1e-5)?;
                let h = g.gelu(h)?;
                let qa = g.slice_cols(h, 0, 2)?;
                let qb = g.slice_cols(h, 2, 4)?;
                let scores = g.matmul_nt(qa, qb)?;
                let scores = g.scale(scores, 0.5)?;
                let scores = g.causal_mask(scores)?;
                let probs = g.softmax_rows(scores)?;
                let mixed = g.matmul(probs, h)?;
                let joined = g.concat_cols(&[mixed, h])?;
                let diff = g.sub(joined, joined)?;
                let again = g.add(joined, diff)?;
                let narrowed = g.slice_cols(again, 2, 6)?;
                let logits = g.matmul_nt(narrowed, table)?;
                g.cross_entropy_masked(logits, &[1, 2, 0, 1], &[false, true, true, true])
            },
            1e-5,
            12,
            7,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn backward_is_linear_in_loss() {
        // grad(l1 + l2) == grad(l1) + grad(l2) within 1e-10 at f64.
        let build = |which: u8| -> (GradMap<f64>,) {
            let mut g = Graph::new();
            let x = g.param_leaf(
                ParamId(0),
                t2(2, 2, vec![0.4, -1.2, 2.1, 0.9]).with_grad(),
                true,
            );
            let sq = g.mul(x, x).unwrap();
            let l1 = g.sum(sq).unwrap();
            let gl = g.gelu(x).unwrap();
            let l2 = g.sum(gl).unwrap();
            let loss = match which {
                0 => g.add(l1, l2).unwrap(),
                1 => l1,
                _ => l2,
            };
            (g.backward(loss).unwrap(),)
        };
        let (sum_grad,) = build(0);
        let (g1,) = build(1);
        let (g2,) = build(2);
        let s = sum_grad.get(ParamId(0)).unwrap().data();
        let a = g1.get(ParamId(0)).unwrap().data();
        let b = g2.get(ParamId(0)).unwrap().data();
        for i in 0..4 {
            assert!((s[i] - (a[i] + b[i])).abs() < 1e-10);
        }
    }
}
