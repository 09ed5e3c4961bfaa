//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every node in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep that
//! visits each node at most once. Gradients reaching a node along several
//! paths are summed.

use rand::Rng;

use crate::crf::Potentials;
use crate::error::{Error, Result};
use crate::tensor::{matmul, Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    AddRow,
    Relu,
    Softmax,
    Concat,
    Gather,
    LayerNorm,
    Dropout,
    Sum,
    Mean,
    Scale,
    Transpose,
    PairDot,
    Reshape,
    CrfLogPartition,
    CrfScore,
}

#[derive(Clone, Copy, Debug)]
struct CrfNodes {
    emissions: NodeId,
    /// `(transitions K×K, start K, stop K)`; `None` means all-zero pairwise terms.
    pairwise: Option<(NodeId, NodeId, NodeId)>,
}

impl CrfNodes {
    fn inputs(&self) -> Vec<NodeId> {
        let mut v = vec![self.emissions];
        if let Some((t, s, e)) = self.pairwise {
            v.extend([t, s, e]);
        }
        v
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow {
        x: NodeId,
        row: NodeId,
    },
    Relu(NodeId),
    Softmax {
        x: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Gather {
        src: NodeId,
        idx: Vec<usize>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Dropout {
        x: NodeId,
        scale: Vec<T>,
    },
    Sum(NodeId),
    Mean(NodeId),
    Scale(NodeId, T),
    Transpose(NodeId),
    PairDot {
        q: NodeId,
        kr: NodeId,
    },
    Reshape(NodeId),
    CrfLogPartition(CrfNodes),
    CrfScore {
        nodes: CrfNodes,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::AddRow { .. } => OpKind::AddRow,
            Op::Relu(_) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Concat { .. } => OpKind::Concat,
            Op::Gather { .. } => OpKind::Gather,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum(_) => OpKind::Sum,
            Op::Mean(_) => OpKind::Mean,
            Op::Scale(..) => OpKind::Scale,
            Op::Transpose(_) => OpKind::Transpose,
            Op::PairDot { .. } => OpKind::PairDot,
            Op::Reshape(_) => OpKind::Reshape,
            Op::CrfLogPartition(_) => OpKind::CrfLogPartition,
            Op::CrfScore { .. } => OpKind::CrfScore,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Makes the backward rule of `kind` wrong (input gradients scaled by
    /// 1.01). Only useful for exercising the gradient checker.
    pub fn inject_backward_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Records `op` only when an input needs gradients.
    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> NodeId {
        let rg = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let op = if rg { op } else { Op::Leaf };
        self.push_raw(value, op, rg)
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: NodeId, ta: bool, b: NodeId, tb: bool) -> Result<NodeId> {
        let v = matmul(self.value(a), ta, self.value(b), tb)?;
        Ok(self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        let rv = self.value(row);
        if rv.shape() != [c] {
            return Err(Error::Shape(format!(
                "add_row: matrix {:?} with row {:?}",
                self.shape(x),
                rv.shape()
            )));
        }
        let mut out = self.value(x).clone();
        let rd = rv.data().to_vec();
        for i in 0..r {
            for (o, &b) in out.data_mut()[i * c..(i + 1) * c].iter_mut().zip(&rd) {
                *o += b;
            }
        }
        Ok(self.push(out, Op::AddRow { x, row }, &[x, row]))
    }

    /// Rectifier; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|a| if a > T::zero() { a } else { T::zero() });
        self.push(v, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis of a matrix. `mask` (row-major, `true` =
    /// keep) must match the logits' shape; masked entries come out exactly 0.
    pub fn masked_softmax(&mut self, x: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::Shape(format!(
                    "softmax mask has {} entries for logits {:?}",
                    m.len(),
                    self.shape(x)
                )));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let keep = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut max = T::neg_infinity();
            for j in 0..c {
                if keep(j) {
                    max = max.max(xv[i * c + j]);
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::FullyMasked { row: i });
            }
            let mut z = T::zero();
            for j in 0..c {
                if keep(j) {
                    let e = (xv[i * c + j] - max).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o = *o / z;
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.push(v, Op::Softmax { x }, &[x]))
    }

    /// Concatenates matrices along `axis` (0 = rows, 1 = columns), or vectors along 0.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        let v = match (first.len(), axis) {
            (1, 0) => {
                let data: Vec<T> = parts
                    .iter()
                    .flat_map(|&p| self.value(p).data().iter().copied())
                    .collect();
                if parts.iter().any(|&p| self.value(p).rank() != 1) {
                    return Err(Error::Shape("concat: mixed ranks".into()));
                }
                Tensor::vector(data)
            }
            (2, 0) => {
                let c = first[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2()?;
                    if pc != c {
                        return Err(Error::Shape(format!(
                            "concat axis 0: {:?} vs {:?}",
                            first,
                            self.shape(p)
                        )));
                    }
                    rows += pr;
                    data.extend_from_slice(self.value(p).data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            (2, 1) => {
                let r = first[0];
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2()?;
                    if pr != r {
                        return Err(Error::Shape(format!(
                            "concat axis 1: {:?} vs {:?}",
                            first,
                            self.shape(p)
                        )));
                    }
                    widths.push(pc);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(r * total);
                for i in 0..r {
                    for (&p, &w) in parts.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
                    }
                }
                Tensor::new(vec![r, total], data)?
            }
            _ => {
                return Err(Error::Shape(format!(
                    "concat: unsupported axis {axis} for shape {first:?}"
                )))
            }
        };
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Selects rows of a matrix (embedding lookup when `src` is a table).
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> Result<NodeId> {
        let (r, c) = self.value(src).dims2()?;
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Shape(format!("gather: row {i} out of {r}")));
            }
            data.extend_from_slice(self.value(src).row(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data)?;
        Ok(self.push(v, Op::Gather { src, idx: idx.to_vec() }, &[src]))
    }

    /// Row-wise layer normalization with gain and bias vectors.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (r, c) = self.value(x).dims2()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "layer_norm: input {:?}, gain {:?}, bias {:?}",
                self.shape(x),
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let eps = T::of(eps);
        let cn = T::of(c as f64);
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let v = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-p)`. `p == 0` is the identity.
    pub fn dropout<R: Rng>(&mut self, x: NodeId, p: f64, rng: &mut R) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = T::of(1.0 / (1.0 - p));
        let scale: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let v = Tensor::new(
            self.shape(x).to_vec(),
            self.value(x).data().iter().zip(&scale).map(|(&a, &s)| a * s).collect(),
        )?;
        Ok(self.push(v, Op::Dropout { x, scale }, &[x]))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = T::of(self.value(x).len() as f64);
        let v = Tensor::scalar(self.value(x).sum() / n);
        self.push(v, Op::Mean(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s), &[x])
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x).transpose()?;
        Ok(self.push(v, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x]))
    }

    /// Per-pair dot products: `q` is `L×k`, `kr` is `(L·M)×k`; the result
    /// is `L×M` with `out[i][j] = q[i] · kr[i·M + j]`.
    pub fn pair_dot(&mut self, q: NodeId, kr: NodeId) -> Result<NodeId> {
        let (l, k) = self.value(q).dims2()?;
        let (lm, k2) = self.value(kr).dims2()?;
        if k != k2 || l == 0 || lm % l != 0 {
            return Err(Error::Shape(format!(
                "pair_dot: {:?} with {:?}",
                self.shape(q),
                self.shape(kr)
            )));
        }
        let m = lm / l;
        let qd = self.value(q).data();
        let kd = self.value(kr).data();
        let mut out = vec![T::zero(); l * m];
        for i in 0..l {
            let qi = &qd[i * k..(i + 1) * k];
            for j in 0..m {
                let row = &kd[(i * m + j) * k..(i * m + j + 1) * k];
                out[i * m + j] = qi.iter().zip(row).map(|(&a, &b)| a * b).sum();
            }
        }
        let v = Tensor::new(vec![l, m], out)?;
        Ok(self.push(v, Op::PairDot { q, kr }, &[q, kr]))
    }

    /// Log-partition of a linear-chain CRF. `emissions` is `n×K`; `pairwise`
    /// holds `(transitions K×K, start K, stop K)` or `None` for no pairwise terms.
    pub fn crf_log_partition(
        &mut self,
        emissions: NodeId,
        pairwise: Option<(NodeId, NodeId, NodeId)>,
    ) -> Result<NodeId> {
        let nodes = CrfNodes { emissions, pairwise };
        let v = self.potentials(&nodes)?.log_partition();
        Ok(self.push(Tensor::scalar(v), Op::CrfLogPartition(nodes), &nodes.inputs()))
    }

    /// Unnormalized log-score of one label sequence.
    pub fn crf_score(
        &mut self,
        emissions: NodeId,
        pairwise: Option<(NodeId, NodeId, NodeId)>,
        labels: &[usize],
    ) -> Result<NodeId> {
        let nodes = CrfNodes { emissions, pairwise };
        let v = self.potentials(&nodes)?.sequence_score(labels)?;
        Ok(self.push(
            Tensor::scalar(v),
            Op::CrfScore {
                nodes,
                labels: labels.to_vec(),
            },
            &nodes.inputs(),
        ))
    }

    fn potentials(&self, nodes: &CrfNodes) -> Result<Potentials<'_, T>> {
        let em = self.value(nodes.emissions);
        match nodes.pairwise {
            None => Potentials::new(em, None),
            Some((t, s, e)) => Potentials::new(em, Some((self.value(t), self.value(s), self.value(e)))),
        }
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut contribs = self.input_grads(node, &g)?;
            if self.fault == Some(node.op.kind()) {
                for (_, t) in &mut contribs {
                    *t = t.map(|v| v * T::of(1.01));
                }
            }
            for (input, t) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
            // keep the node's own gradient for inspection
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let val = |id: NodeId| self.value(id);
        let out = match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul { a, b, ta, tb } => {
                // C = op(A) op(B)
                let (av, bv) = (val(*a), val(*b));
                let ga = if *ta {
                    matmul(bv, *tb, g, true)?
                } else {
                    matmul(g, false, bv, !*tb)?
                };
                let gb = if *tb {
                    matmul(g, true, av, *ta)?
                } else {
                    matmul(av, !*ta, g, false)?
                };
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y)?),
                (*b, g.zip_map(val(*a), |x, y| x * y)?),
            ],
            Op::AddRow { x, row } => {
                let (r, c) = g.dims2()?;
                let mut gr = vec![T::zero(); c];
                for i in 0..r {
                    for (acc, &v) in gr.iter_mut().zip(g.row(i)) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*row, Tensor::vector(gr))]
            }
            Op::Relu(x) => vec![(
                *x,
                g.zip_map(val(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?,
            )],
            Op::Softmax { x } => {
                let y = &node.value;
                let (r, c) = y.dims2()?;
                let mut gx = vec![T::zero(); r * c];
                for i in 0..r {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                vec![(*x, Tensor::new(vec![r, c], gx)?)]
            }
            Op::Concat { parts, axis } => {
                let mut res = Vec::with_capacity(parts.len());
                match (g.rank(), axis) {
                    (1, 0) => {
                        let mut off = 0;
                        for &p in parts {
                            let n = val(p).len();
                            res.push((p, Tensor::vector(g.data()[off..off + n].to_vec())));
                            off += n;
                        }
                    }
                    (2, 0) => {
                        let mut off = 0;
                        for &p in parts {
                            let n = val(p).len();
                            res.push((
                                p,
                                Tensor::new(val(p).shape().to_vec(), g.data()[off..off + n].to_vec())?,
                            ));
                            off += n;
                        }
                    }
                    _ => {
                        let (r, total) = g.dims2()?;
                        let mut col = 0;
                        for &p in parts {
                            let w = val(p).shape()[1];
                            let mut d = Vec::with_capacity(r * w);
                            for i in 0..r {
                                d.extend_from_slice(&g.data()[i * total + col..i * total + col + w]);
                            }
                            res.push((p, Tensor::new(vec![r, w], d)?));
                            col += w;
                        }
                    }
                }
                res
            }
            Op::Gather { src, idx } => {
                let shape = val(*src).shape().to_vec();
                let c = shape[1];
                let mut gs = Tensor::zeros(&shape);
                for (k, &i) in idx.iter().enumerate() {
                    let dst = &mut gs.data_mut()[i * c..(i + 1) * c];
                    for (d, &v) in dst.iter_mut().zip(g.row(k)) {
                        *d += v;
                    }
                }
                vec![(*src, gs)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.dims2()?;
                let gam = val(*gamma).data();
                let cn = T::of(c as f64);
                let mut gx = vec![T::zero(); r * c];
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for i in 0..r {
                    let gr = g.row(i);
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        m1 += d;
                        m2 += d * xh[j];
                        gg[j] += gr[j] * xh[j];
                        gb[j] += gr[j];
                    }
                    m1 = m1 / cn;
                    m2 = m2 / cn;
                    for j in 0..c {
                        let d = gr[j] * gam[j];
                        gx[i * c + j] = inv_std[i] * (d - m1 - xh[j] * m2);
                    }
                }
                vec![
                    (*x, Tensor::new(vec![r, c], gx)?),
                    (*gamma, Tensor::vector(gg)),
                    (*beta, Tensor::vector(gb)),
                ]
            }
            Op::Dropout { x, scale } => vec![(
                *x,
                Tensor::new(
                    g.shape().to_vec(),
                    g.data().iter().zip(scale).map(|(&a, &s)| a * s).collect(),
                )?,
            )],
            Op::Sum(x) => {
                let gv = g.item();
                vec![(*x, Tensor::full(val(*x).shape(), gv))]
            }
            Op::Mean(x) => {
                let n = T::of(val(*x).len() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::Transpose(x) => vec![(*x, g.transpose()?)],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape().to_vec())?)],
            Op::PairDot { q, kr } => {
                let (l, k) = val(*q).dims2()?;
                let m = g.shape()[1];
                let qd = val(*q).data();
                let kd = val(*kr).data();
                let mut gq = vec![T::zero(); l * k];
                let mut gk = vec![T::zero(); l * m * k];
                for i in 0..l {
                    for j in 0..m {
                        let gij = g.at(i, j);
                        if gij == T::zero() {
                            continue;
                        }
                        let base = (i * m + j) * k;
                        for t in 0..k {
                            gq[i * k + t] += gij * kd[base + t];
                            gk[base + t] += gij * qd[i * k + t];
                        }
                    }
                }
                vec![
                    (*q, Tensor::new(vec![l, k], gq)?),
                    (*kr, Tensor::new(vec![l * m, k], gk)?),
                ]
            }
            Op::CrfLogPartition(nodes) => {
                let pot = self.potentials(nodes)?;
                let marg = pot.marginals();
                let gv = g.item();
                let mut res = vec![(nodes.emissions, marg.unary.map(|v| v * gv))];
                if let Some((t, s, e)) = nodes.pairwise {
                    res.push((t, marg.pairwise.map(|v| v * gv)));
                    res.push((s, marg.start.map(|v| v * gv)));
                    res.push((e, marg.stop.map(|v| v * gv)));
                }
                res
            }
            Op::CrfScore { nodes, labels } => {
                let gv = g.item();
                let em_shape = val(nodes.emissions).shape().to_vec();
                let k = em_shape[1];
                let mut ge = Tensor::zeros(&em_shape);
                for (t, &y) in labels.iter().enumerate() {
                    ge.data_mut()[t * k + y] += gv;
                }
                let mut res = vec![(nodes.emissions, ge)];
                if let Some((tn, sn, en)) = nodes.pairwise {
                    let mut gt = Tensor::zeros(&[k, k]);
                    for w in labels.windows(2) {
                        gt.data_mut()[w[0] * k + w[1]] += gv;
                    }
                    let mut gs = Tensor::zeros(&[k]);
                    let mut gend = Tensor::zeros(&[k]);
                    gs.data_mut()[labels[0]] += gv;
                    gend.data_mut()[labels[labels.len() - 1]] += gv;
                    res.push((tn, gt));
                    res.push((sn, gs));
                    res.push((en, gend));
                }
                res
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -1.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[1.0, 0.0]);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn relu_derivative_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0]));
        let r = g.relu(x);
        let loss = g.sum(r);
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[0.0]);
    }

    #[test]
    fn shared_use_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let y = g.add(x, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn linearity_of_weighted_sum() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.5, -0.25, 4.0]));
        let x = g.param(Tensor::vector(vec![9.0, 8.0, 7.0]));
        let ax = g.mul(a, x).unwrap();
        let loss = g.sum(ax);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, -0.25, 4.0]);
        assert!(grads.get(a).is_none());
    }

    #[test]
    fn uniform_softmax() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[1, 2], &[0.0, 0.0]));
        let s = g.masked_softmax(x, Some(&[true, true])).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn masked_entries_are_exactly_zero() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[2, 3], &[1.0, 2.0, 3.0, -1.0, 0.0, 9.0]));
        let s = g
            .masked_softmax(x, Some(&[true, false, true, false, true, true]))
            .unwrap();
        let v = g.value(s);
        assert_eq!(v.at(0, 1), 0.0);
        assert_eq!(v.at(1, 0), 0.0);
        for r in 0..2 {
            assert!((v.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0; 4]));
        let err = g.masked_softmax(x, Some(&[true, true, false, false])).unwrap_err();
        assert!(matches!(err, Error::FullyMasked { row: 1 }));
    }

    #[test]
    fn softmax_mask_shape_checked() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0; 4]));
        assert!(g.masked_softmax(x, Some(&[true])).is_err());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.param(Tensor::zeros(&[2, 3]));
        let b = g.param(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn constants_do_not_record() {
        let mut g: Graph<f64> = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0]));
        let b = g.add(a, a).unwrap();
        assert!(!g.requires_grad(b));
        assert_eq!(g.kind(b), OpKind::Leaf);
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        use rand::SeedableRng;
        let run = |seed| {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut g: Graph<f64> = Graph::new();
            let x = g.constant(Tensor::ones(&[1, 1000]));
            let d = g.dropout(x, 0.2, &mut rng).unwrap();
            g.value(d).clone()
        };
        let a = run(3);
        assert_eq!(a, run(3));
        assert!(a.data().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-12));
        let mean = a.sum() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "{mean}");
    }
}
