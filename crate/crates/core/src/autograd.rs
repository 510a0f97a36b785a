//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order, so node inputs
//! always precede the node itself. [`Tape::backward`] walks the nodes in
//! reverse and accumulates exact vector-Jacobian products.
//!
//! ```
//! use rofusion::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]));
//! let w = tape.leaf(Tensor::from_rows(&[[1.0, 3.0], [2.0, 4.0]]));
//! let b = tape.leaf(Tensor::from_rows(&[[1.0, 1.0]]));
//! let y = tape.linear(x, w, b).unwrap();
//! assert_eq!(tape.value(y).data(), &[6.0, 12.0]);
//! ```

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_bias, matmul_transposed, transposed_matmul, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operations. Also the registry used by gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Linear,
    Relu,
    ConcatCols,
    SliceCols,
    MaxPoolRows,
    GroupMaxPool,
    GatherRows,
    SoftmaxCrossEntropy,
    SmoothL1,
    Add,
    Scale,
}

impl OpKind {
    /// Differentiable operations, each listed once.
    pub const DIFFERENTIABLE: [OpKind; 11] = [
        OpKind::Linear,
        OpKind::Relu,
        OpKind::ConcatCols,
        OpKind::SliceCols,
        OpKind::MaxPoolRows,
        OpKind::GroupMaxPool,
        OpKind::GatherRows,
        OpKind::SoftmaxCrossEntropy,
        OpKind::SmoothL1,
        OpKind::Add,
        OpKind::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Linear => "linear",
            OpKind::Relu => "relu",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceCols => "slice_cols",
            OpKind::MaxPoolRows => "maxpool_rows",
            OpKind::GroupMaxPool => "group_maxpool",
            OpKind::GatherRows => "gather_rows",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::SmoothL1 => "smooth_l1",
            OpKind::Add => "add",
            OpKind::Scale => "scale",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    SliceCols { x: NodeId, start: usize },
    MaxPoolRows { x: NodeId, argmax: Vec<usize> },
    GroupMaxPool { x: NodeId, argmax: Vec<usize> },
    GatherRows { x: NodeId, index: Vec<usize> },
    SoftmaxCrossEntropy {
        logits: NodeId,
        probs: Tensor<T>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    SmoothL1 {
        pred: NodeId,
        diff: Tensor<T>,
        mask: Vec<bool>,
        count: usize,
    },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, factor: T },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Linear { .. } => OpKind::Linear,
            Op::Relu { .. } => OpKind::Relu,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::MaxPoolRows { .. } => OpKind::MaxPoolRows,
            Op::GroupMaxPool { .. } => OpKind::GroupMaxPool,
            Op::GatherRows { .. } => OpKind::GatherRows,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::SmoothL1 { .. } => OpKind::SmoothL1,
            Op::Add { .. } => OpKind::Add,
            Op::Scale { .. } => OpKind::Scale,
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Column-wise max over rows. Ties resolve to the first row.
pub fn maxpool_rows<T: Scalar>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<usize>)> {
    if x.rows() == 0 {
        return Err(Error::EmptyPool);
    }
    let mut values = x.row(0).to_vec();
    let mut argmax = vec![0usize; x.cols()];
    for r in 1..x.rows() {
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > values[c] {
                values[c] = v;
                argmax[c] = r;
            }
        }
    }
    Ok((values, argmax))
}

fn check_finite<T: Scalar>(op: &'static str, t: &Tensor<T>) {
    debug_assert!(t.is_finite(), "{op} produced a non-finite value");
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Harness self-test hook: backward through every op of `kind` returns a
    /// deliberately wrong (scaled) gradient.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn kind(&self, id: NodeId) -> OpKind {
        self.nodes[id.0].op.kind()
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// `x · w + b` for `x: N×Cin`, `w: Cin×Cout`, `b: 1×Cout`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.1 != ws.0 {
            return Err(Error::Dimension {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        if bs != (1, ws.1) {
            return Err(Error::Dimension {
                op: "linear bias",
                left: ws,
                right: bs,
            });
        }
        let out = matmul_bias(self.value(x), self.value(w), Some(self.value(b)));
        check_finite("linear", &out);
        Ok(self.push(Op::Linear { x, w, b }, out))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(Op::Relu { x }, out)
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let (n, ca, cb) = (av.rows(), av.cols(), bv.cols());
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(av.row(r));
            data.extend_from_slice(bv.row(r));
        }
        let out = Tensor::from_vec(n, ca + cb, data)?;
        Ok(self.push(Op::ConcatCols { a, b }, out))
    }

    /// Columns `start..end` of `x`.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::Index {
                op: "slice_cols",
                index: end,
                bound: xv.cols() + 1,
            });
        }
        let n = xv.rows();
        let mut data = Vec::with_capacity(n * (end - start));
        for r in 0..n {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let out = Tensor::from_vec(n, end - start, data)?;
        Ok(self.push(Op::SliceCols { x, start }, out))
    }

    /// Column-wise max over all rows, as a `1×C` node.
    pub fn maxpool_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let (values, argmax) = maxpool_rows(self.value(x))?;
        let out = Tensor::row_vector(&values);
        Ok(self.push(Op::MaxPoolRows { x, argmax }, out))
    }

    /// Per-group column-wise max: row `g` of the `G×C` output pools the rows
    /// of `x` whose group id is `g`.
    pub fn group_maxpool(&mut self, x: NodeId, groups: &[usize], n_groups: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if groups.len() != xv.rows() {
            return Err(Error::Dimension {
                op: "group_maxpool",
                left: xv.shape(),
                right: (groups.len(), 1),
            });
        }
        let c = xv.cols();
        let mut out = Tensor::zeros(n_groups, c);
        let mut argmax = vec![usize::MAX; n_groups * c];
        for (r, &g) in groups.iter().enumerate() {
            if g >= n_groups {
                return Err(Error::Index {
                    op: "group_maxpool",
                    index: g,
                    bound: n_groups,
                });
            }
            let row = xv.row(r);
            let slot = &mut argmax[g * c..(g + 1) * c];
            let orow = out.row_mut(g);
            for j in 0..c {
                if slot[j] == usize::MAX || row[j] > orow[j] {
                    orow[j] = row[j];
                    slot[j] = r;
                }
            }
        }
        if argmax.contains(&usize::MAX) && c > 0 {
            return Err(Error::EmptyPool);
        }
        if c == 0 && (0..n_groups).any(|g| !groups.contains(&g)) {
            return Err(Error::EmptyPool);
        }
        Ok(self.push(Op::GroupMaxPool { x, argmax }, out))
    }

    /// Output row `i` is row `index[i]` of `x`.
    pub fn gather_rows(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::Index {
                op: "gather_rows",
                index: bad,
                bound: xv.rows(),
            });
        }
        let out = xv.select_rows(index);
        Ok(self.push(
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            out,
        ))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize], mask: &[bool]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, k) = lv.shape();
        if targets.len() != n || mask.len() != n {
            return Err(Error::Dimension {
                op: "softmax_cross_entropy",
                left: lv.shape(),
                right: (targets.len(), mask.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::Index {
                op: "softmax_cross_entropy",
                index: bad,
                bound: k,
            });
        }
        let mut probs = Tensor::zeros(n, k);
        let mut total = T::zero();
        let mut count = 0usize;
        for r in 0..n {
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &v in row {
                z += (v - m).exp();
            }
            let prow = probs.row_mut(r);
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - m).exp() / z;
            }
            if mask[r] {
                total += z.ln() + m - row[targets[r]];
                count += 1;
            }
        }
        let loss = if count > 0 {
            total / T::lit(count as f64)
        } else {
            T::zero()
        };
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Mean over unmasked entries of the Huber-style smooth L1 with transition at 1.
    pub fn smooth_l1(&mut self, pred: NodeId, target: &Tensor<T>, mask: &[bool]) -> Result<NodeId> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || mask.len() != pv.len() {
            return Err(Error::Dimension {
                op: "smooth_l1",
                left: pv.shape(),
                right: target.shape(),
            });
        }
        let mut diff = Tensor::zeros(pv.rows(), pv.cols());
        let mut total = T::zero();
        let mut count = 0usize;
        let half = T::lit(0.5);
        for (i, (&p, &t)) in pv.data().iter().zip(target.data()).enumerate() {
            let d = p - t;
            diff.data_mut()[i] = d;
            if mask[i] {
                total += if d.abs() < T::one() { half * d * d } else { d.abs() - half };
                count += 1;
            }
        }
        let loss = if count > 0 {
            total / T::lit(count as f64)
        } else {
            T::zero()
        };
        Ok(self.push(
            Op::SmoothL1 {
                pred,
                diff,
                mask: mask.to_vec(),
                count,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "add",
                left: av.shape(),
                right: bv.shape(),
            });
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(Op::Add { a, b }, out))
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, out)
    }

    /// Branch pattern of every non-smooth op on the tape: relu signs and
    /// max-pool argmax choices. Two evaluations with equal signatures lie on
    /// the same smooth piece.
    pub fn kink_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu { x } => sig.extend(self.value(*x).data().iter().map(|&v| usize::from(v > T::zero()))),
                Op::MaxPoolRows { argmax, .. } | Op::GroupMaxPool { argmax, .. } => sig.extend_from_slice(argmax),
                _ => {}
            }
        }
        sig
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(Error::NonScalarSeed(shape));
        }
        self.backward_seeded(loss, Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: gradients of `sum(seed ⊙ out)`.
    pub fn backward_seeded(&self, out: NodeId, seed: Tensor<T>) -> Result<Gradients<T>> {
        let loss = out;
        if seed.shape() != self.value(out).shape() {
            return Err(Error::Dimension {
                op: "backward_seeded",
                left: self.value(out).shape(),
                right: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(seed);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let wrong = if self.fault == Some(node.op.kind()) {
                T::lit(1.5)
            } else {
                T::one()
            };
            let send = |grads: &mut Vec<Option<Tensor<T>>>, to: NodeId, mut contrib: Tensor<T>| {
                if wrong != T::one() {
                    contrib = contrib.map(|v| v * wrong);
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let gx = matmul_transposed(&g, self.value(*w));
                    let gw = transposed_matmul(self.value(*x), &g);
                    let mut gb = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (acc, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                            *acc += v;
                        }
                    }
                    send(&mut grads, *x, gx);
                    send(&mut grads, *w, gw);
                    send(&mut grads, *b, gb);
                }
                Op::Relu { x } => {
                    let xv = self.value(*x);
                    let mut gx = g.clone();
                    for (gv, &v) in gx.data_mut().iter_mut().zip(xv.data()) {
                        if v <= T::zero() {
                            *gv = T::zero();
                        }
                    }
                    send(&mut grads, *x, gx);
                }
                Op::ConcatCols { a, b } => {
                    let ca = self.value(*a).cols();
                    let cb = self.value(*b).cols();
                    let mut ga = Tensor::zeros(g.rows(), ca);
                    let mut gb = Tensor::zeros(g.rows(), cb);
                    for r in 0..g.rows() {
                        ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                        gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                    }
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::SliceCols { x, start } => {
                    let xs = self.value(*x).shape();
                    let mut gx = Tensor::zeros(xs.0, xs.1);
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    send(&mut grads, *x, gx);
                }
                Op::MaxPoolRows { x, argmax } => {
                    let xs = self.value(*x).shape();
                    let mut gx = Tensor::zeros(xs.0, xs.1);
                    for (c, &r) in argmax.iter().enumerate() {
                        gx.set(r, c, gx.get(r, c) + g.get(0, c));
                    }
                    send(&mut grads, *x, gx);
                }
                Op::GroupMaxPool { x, argmax } => {
                    let xs = self.value(*x).shape();
                    let c = xs.1;
                    let mut gx = Tensor::zeros(xs.0, xs.1);
                    for (slot, &r) in argmax.iter().enumerate() {
                        let (grp, col) = (slot / c, slot % c);
                        gx.set(r, col, gx.get(r, col) + g.get(grp, col));
                    }
                    send(&mut grads, *x, gx);
                }
                Op::GatherRows { x, index } => {
                    let xs = self.value(*x).shape();
                    let mut gx = Tensor::zeros(xs.0, xs.1);
                    for (i, &src) in index.iter().enumerate() {
                        for (acc, &v) in gx.row_mut(src).iter_mut().zip(g.row(i)) {
                            *acc += v;
                        }
                    }
                    send(&mut grads, *x, gx);
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    probs,
                    targets,
                    mask,
                    count,
                } => {
                    let mut gl = Tensor::zeros(probs.rows(), probs.cols());
                    if *count > 0 {
                        let scale = g.get(0, 0) / T::lit(*count as f64);
                        for r in 0..probs.rows() {
                            if !mask[r] {
                                continue;
                            }
                            let grow = gl.row_mut(r);
                            for (gv, &p) in grow.iter_mut().zip(probs.row(r)) {
                                *gv = p * scale;
                            }
                            grow[targets[r]] -= scale;
                        }
                    }
                    send(&mut grads, *logits, gl);
                }
                Op::SmoothL1 { pred, diff, mask, count } => {
                    let mut gp = Tensor::zeros(diff.rows(), diff.cols());
                    if *count > 0 {
                        let scale = g.get(0, 0) / T::lit(*count as f64);
                        for (i, &d) in diff.data().iter().enumerate() {
                            if mask[i] {
                                let dd = if d.abs() < T::one() { d } else { d.signum() };
                                gp.data_mut()[i] = dd * scale;
                            }
                        }
                    }
                    send(&mut grads, *pred, gp);
                }
                Op::Add { a, b } => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.clone());
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    send(&mut grads, *x, g.map(|v| v * f));
                }
            }
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Per-node gradient accumulators produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `id`, or `None` when the node does not reach the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `id`; zeros of the node's shape when disconnected.
    pub fn wrt(&self, id: NodeId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Tensor::zeros(r, c)
            }
        }
    }
}
