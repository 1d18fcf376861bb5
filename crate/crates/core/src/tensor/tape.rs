//! Reverse-mode differentiation tape.
//!
//! A [`Tape`] records one forward pass as a list of primitive operations in
//! topological order (inputs always precede consumers, by construction).
//! [`Tape::backward`] replays the list in reverse, accumulating vector-Jacobian
//! products into every gradient-requiring leaf reachable from the loss.
//!
//! The tape is per-forward-pass: create one, run a forward, call `backward`,
//! read gradients, then drop or [`Tape::reset`] it. It is not shareable
//! across concurrent forward passes; run independent passes on independent
//! tapes. Gradient accumulation inside one backward pass always runs in a
//! fixed order, so results are bitwise reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{kernels, Element, Tensor};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Destination for parameter registration. Parameter containers walk their
/// tensors in a fixed order and hand each one to a sink; a [`Tape`] turns
/// them into gradient-requiring leaves, while [`VarList`] replays vars that
/// were registered elsewhere (used by the gradient checker, which owns the
/// parameter tensors itself).
pub trait ParamSink<E: Element> {
    fn slot(&mut self, name: &str, value: &Tensor<E>) -> Var;
}

impl<E: Element> ParamSink<E> for Tape<E> {
    fn slot(&mut self, name: &str, value: &Tensor<E>) -> Var {
        self.param_named(name, value)
    }
}

/// Replays an ordered var list through the [`ParamSink`] interface.
pub struct VarList<'a> {
    vars: &'a [Var],
    cursor: usize,
}

impl<'a> VarList<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        VarList { vars, cursor: 0 }
    }

    /// Vars not yet consumed; zero when a traversal used the whole list.
    pub fn remaining(&self) -> usize {
        self.vars.len() - self.cursor
    }
}

impl<E: Element> ParamSink<E> for VarList<'_> {
    fn slot(&mut self, name: &str, _value: &Tensor<E>) -> Var {
        assert!(
            self.cursor < self.vars.len(),
            "var list exhausted at parameter {name}"
        );
        let v = self.vars[self.cursor];
        self.cursor += 1;
        v
    }
}

/// Registers on a tape like [`Tape`] itself while also recording the flat
/// var order, so callers can later read gradients back positionally.
pub struct RecordingSink<'a, E: Element> {
    pub tape: &'a mut Tape<E>,
    pub order: Vec<Var>,
}

impl<'a, E: Element> RecordingSink<'a, E> {
    pub fn new(tape: &'a mut Tape<E>) -> Self {
        RecordingSink {
            tape,
            order: Vec::new(),
        }
    }
}

impl<E: Element> ParamSink<E> for RecordingSink<'_, E> {
    fn slot(&mut self, name: &str, value: &Tensor<E>) -> Var {
        let v = self.tape.param_named(name, value);
        self.order.push(v);
        v
    }
}

/// Precomputed index map for a gather (`out[i] = x[map[i]]`).
///
/// `inverse` is present when the map is a bijection, which lets the backward
/// pass scatter without write conflicts.
#[derive(Debug, Clone)]
pub struct GatherMap {
    pub idx: Arc<Vec<usize>>,
    pub out_shape: Vec<usize>,
    pub inverse: Option<Arc<Vec<usize>>>,
}

impl GatherMap {
    pub fn new(idx: Vec<usize>, out_shape: Vec<usize>) -> Self {
        GatherMap {
            idx: Arc::new(idx),
            out_shape,
            inverse: None,
        }
    }

    /// Builds a gather map and records the inverse permutation. Panics if the
    /// map is not a bijection onto `0..idx.len()`.
    pub fn bijective(idx: Vec<usize>, out_shape: Vec<usize>) -> Self {
        let mut inverse = vec![usize::MAX; idx.len()];
        for (i, &src) in idx.iter().enumerate() {
            debug_assert!(inverse[src] == usize::MAX, "duplicate source {src}");
            inverse[src] = i;
        }
        debug_assert!(inverse.iter().all(|&v| v != usize::MAX));
        GatherMap {
            idx: Arc::new(idx),
            out_shape,
            inverse: Some(Arc::new(inverse)),
        }
    }
}

#[derive(Debug, Clone)]
enum Op<E: Element> {
    Leaf,
    /// `out = a @ b`, a: [batch, m, k], b: [batch?, k, n].
    Matmul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_batched: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `b` tiled over the leading extents of `a` (suffix broadcast).
    AddBcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: E,
    },
    Relu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxLast {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        c: usize,
        eps: E,
    },
    BceWithLogits {
        logits: Var,
        labels: Arc<Vec<E>>,
    },
    Sum {
        x: Var,
    },
    /// Mean over the middle axis of `[b, t, c]`.
    MeanMiddle {
        x: Var,
        t: usize,
        c: usize,
    },
    Gather {
        x: Var,
        map: GatherMap,
    },
    ConcatLast {
        a: Var,
        b: Var,
        a_cols: usize,
        b_cols: usize,
    },
    Reshape {
        x: Var,
    },
}

struct Node<E: Element> {
    value: Tensor<E>,
    op: Op<E>,
    requires: bool,
    name: Option<String>,
}

/// Wengert list plus value arena for one forward pass.
pub struct Tape<E: Element> {
    nodes: Vec<Node<E>>,
    grads: Vec<Option<Tensor<E>>>,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Drops all recorded state so the tape can host a fresh forward pass.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<E>, op: Op<E>, requires: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires,
            name: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        value: Tensor<E>,
        op: Op<E>,
        requires: bool,
        what: &str,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite values produced by {what}"
            )));
        }
        Ok(self.push(value, op, requires))
    }

    /// Registers an input that does not need a gradient.
    pub fn leaf(&mut self, value: Tensor<E>) -> Result<Var> {
        self.push_checked(value, Op::Leaf, false, "leaf input")
    }

    /// Registers a gradient-requiring leaf. The tensor is snapshotted, so
    /// later mutation of the original does not affect this pass.
    pub fn param(&mut self, value: &Tensor<E>) -> Var {
        self.push(value.clone(), Op::Leaf, true)
    }

    /// [`Tape::param`] with a name attached, mainly so callers can audit the
    /// registration order against their own parameter traversal.
    pub fn param_named(&mut self, name: &str, value: &Tensor<E>) -> Var {
        let v = self.param(value);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Names of named leaves in registration order.
    pub fn registered_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| n.name.as_deref())
            .collect()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires
    }

    // -- primitive operations -------------------------------------------

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across batch), or `[.., k, n]` with leading extents equal to
    /// `a`'s (or all 1).
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::Dim(format!(
                "matmul needs rank >= 2 operands, got {ash:?} x {bsh:?}"
            )));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner extents disagree: {ash:?} x {bsh:?}"
            )));
        }
        let a_lead = &ash[..ash.len() - 2];
        let b_lead = &bsh[..bsh.len() - 2];
        let b_batched = if b_lead.is_empty() || b_lead.iter().all(|&d| d == 1) {
            false
        } else if b_lead == a_lead {
            true
        } else {
            return Err(Error::Dim(format!(
                "matmul batch extents disagree: {ash:?} x {bsh:?}"
            )));
        };
        let batch: usize = a_lead.iter().product();
        let data = kernels::matmul(
            self.value(a).data(),
            self.value(b).data(),
            batch,
            m,
            k,
            n,
            b_batched,
        );
        let mut out_shape = a_lead.to_vec();
        out_shape.push(m);
        out_shape.push(n);
        let requires = self.requires(a) || self.requires(b);
        let value = Tensor::new(out_shape, data)?;
        self.push_checked(
            value,
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            },
            requires,
            "matmul",
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = kernels::binary_zip(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let requires = self.requires(a) || self.requires(b);
        self.push_checked(value, Op::Add { a, b }, requires, "add")
    }

    /// Adds `b` to `a` with `b`'s shape equal to a suffix of `a`'s shape.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bsh.len() > ash.len() || ash[ash.len() - bsh.len()..] != bsh[..] {
            return Err(Error::Dim(format!(
                "broadcast add: {bsh:?} is not a suffix of {ash:?}"
            )));
        }
        let span = self.value(b).numel();
        let bdat = self.value(b).data();
        let data: Vec<E> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bdat[i % span])
            .collect();
        let value = Tensor::new(ash, data)?;
        let requires = self.requires(a) || self.requires(b);
        self.push_checked(value, Op::AddBcast { a, b }, requires, "broadcast add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data = kernels::binary_zip(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let requires = self.requires(a) || self.requires(b);
        self.push_checked(value, Op::Mul { a, b }, requires, "mul")
    }

    pub fn scale(&mut self, x: Var, c: E) -> Result<Var> {
        let data = kernels::unary_map(self.value(x).data(), |v| v * c);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let requires = self.requires(x);
        self.push_checked(value, Op::Scale { x, c }, requires, "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let zero = E::zero();
        let data = kernels::unary_map(self.value(x).data(), |v| if v > zero { v } else { zero });
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let requires = self.requires(x);
        self.push_checked(value, Op::Relu { x }, requires, "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let data = kernels::unary_map(self.value(x).data(), kernels::sigmoid);
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let requires = self.requires(x);
        self.push_checked(value, Op::Sigmoid { x }, requires, "sigmoid")
    }

    /// Max-subtracted softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let cols = *sh
            .last()
            .ok_or_else(|| Error::Dim("softmax on rank-0 tensor".to_string()))?;
        if cols == 0 {
            return Err(Error::Dim("softmax over empty last axis".to_string()));
        }
        let data = kernels::softmax_rows(self.value(x).data(), cols);
        let value = Tensor::new(sh, data)?;
        let requires = self.requires(x);
        self.push_checked(value, Op::SoftmaxLast { x, cols }, requires, "softmax")
    }

    /// Per-position normalization over the channel axis: biased variance,
    /// epsilon inside the square root, then `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let c = *sh
            .last()
            .ok_or_else(|| Error::Dim("layer_norm on rank-0 tensor".to_string()))?;
        if c == 0 {
            return Err(Error::Dim("layer_norm over zero channels".to_string()));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dim(format!(
                "layer_norm params {:?}/{:?} do not match channel extent {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let epse = E::from_f64(eps);
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![E::zero(); xs.len()];
        for (row, out_row) in xs.chunks(c).zip(data.chunks_mut(c)) {
            let (mean, rstd) = row_moments(row, epse);
            for ((o, &v), (&gj, &bj)) in out_row
                .iter_mut()
                .zip(row.iter())
                .zip(g.iter().zip(b.iter()))
            {
                *o = (v - mean) * rstd * gj + bj;
            }
        }
        let value = Tensor::new(sh, data)?;
        let requires = self.requires(x) || self.requires(gamma) || self.requires(beta);
        self.push_checked(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                eps: epse,
            },
            requires,
            "layer_norm",
        )
    }

    /// `x @ w + bias` with `w` shared over the leading extents of `x`.
    pub fn affine(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bcast(y, bias)
    }

    /// Mean over the batch of the fused binary cross-entropy
    /// `softplus(-z) * y + softplus(z) * (1 - y)`. Labels must be exactly 0
    /// or 1 and are not differentiated through.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &Tensor<E>) -> Result<Var> {
        if self.shape(logits) != labels.shape() {
            return Err(Error::Dim(format!(
                "bce logits {:?} vs labels {:?}",
                self.shape(logits),
                labels.shape()
            )));
        }
        for (i, &y) in labels.data().iter().enumerate() {
            if y != E::zero() && y != E::one() {
                return Err(Error::Validation(format!(
                    "label at index {i} is {y}, expected 0 or 1"
                )));
            }
        }
        let zs = self.value(logits).data();
        let batch = E::from_f64(zs.len() as f64);
        let mut acc = E::zero();
        for (&z, &y) in zs.iter().zip(labels.data().iter()) {
            let term = if y == E::one() {
                kernels::softplus(-z)
            } else {
                kernels::softplus(z)
            };
            acc = acc + term;
        }
        let value = Tensor::scalar(acc / batch);
        let requires = self.requires(logits);
        self.push_checked(
            value,
            Op::BceWithLogits {
                logits,
                labels: Arc::new(labels.data().to_vec()),
            },
            requires,
            "bce_with_logits",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = E::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let requires = self.requires(x);
        self.push_checked(Tensor::scalar(acc), Op::Sum { x }, requires, "sum")
    }

    /// Mean over the middle axis of a `[b, t, c]` tensor, giving `[b, c]`.
    pub fn mean_middle(&mut self, x: Var) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        if sh.len() != 3 {
            return Err(Error::Dim(format!(
                "mean_middle expects rank 3, got {sh:?}"
            )));
        }
        let (b, t, c) = (sh[0], sh[1], sh[2]);
        let xs = self.value(x).data();
        let inv_t = E::one() / E::from_f64(t as f64);
        let mut data = vec![E::zero(); b * c];
        for bi in 0..b {
            for ti in 0..t {
                let row = &xs[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                let out = &mut data[bi * c..(bi + 1) * c];
                for (o, &v) in out.iter_mut().zip(row.iter()) {
                    *o = *o + v;
                }
            }
        }
        for o in data.iter_mut() {
            *o = *o * inv_t;
        }
        let value = Tensor::new(vec![b, c], data)?;
        let requires = self.requires(x);
        self.push_checked(value, Op::MeanMiddle { x, t, c }, requires, "mean_middle")
    }

    /// Index-map gather: `out[i] = x[map.idx[i]]`.
    pub fn gather(&mut self, x: Var, map: GatherMap) -> Result<Var> {
        let numel = self.value(x).numel();
        debug_assert!(
            map.idx.iter().all(|&i| i < numel),
            "gather index out of range"
        );
        let out_numel: usize = map.out_shape.iter().product();
        if out_numel != map.idx.len() {
            return Err(Error::Contract(format!(
                "gather map length {} does not match output shape {:?}",
                map.idx.len(),
                map.out_shape
            )));
        }
        let data = kernels::gather(self.value(x).data(), &map.idx);
        let value = Tensor::new(map.out_shape.clone(), data)?;
        let requires = self.requires(x);
        self.push_checked(value, Op::Gather { x, map }, requires, "gather")
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != bsh.len() || ash.is_empty() || ash[..ash.len() - 1] != bsh[..bsh.len() - 1]
        {
            return Err(Error::Dim(format!(
                "concat_last shapes disagree: {ash:?} vs {bsh:?}"
            )));
        }
        let a_cols = ash[ash.len() - 1];
        let b_cols = bsh[bsh.len() - 1];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let rows = ad.len() / a_cols;
        let mut data = Vec::with_capacity(rows * (a_cols + b_cols));
        for r in 0..rows {
            data.extend_from_slice(&ad[r * a_cols..(r + 1) * a_cols]);
            data.extend_from_slice(&bd[r * b_cols..(r + 1) * b_cols]);
        }
        let mut out_shape = ash[..ash.len() - 1].to_vec();
        out_shape.push(a_cols + b_cols);
        let value = Tensor::new(out_shape, data)?;
        let requires = self.requires(a) || self.requires(b);
        self.push_checked(
            value,
            Op::ConcatLast {
                a,
                b,
                a_cols,
                b_cols,
            },
            requires,
            "concat_last",
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let requires = self.requires(x);
        self.push_checked(value, Op::Reshape { x }, requires, "reshape")
    }

    // -- backward ---------------------------------------------------------

    /// Replays the tape in reverse, filling gradient buffers for every
    /// gradient-requiring leaf reachable from `loss`. Leaves not reachable
    /// keep an absent gradient. The tape stays valid for value reads and can
    /// be reset afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let n = self.nodes.len();
        let mut flows: Vec<Option<Vec<E>>> = vec![None; n];
        flows[loss.0] = Some(vec![E::one()]);
        for i in (0..n).rev() {
            if !self.nodes[i].requires {
                flows[i] = None;
                continue;
            }
            let Some(g) = flows[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    let t = Tensor::new(self.nodes[i].value.shape().to_vec(), g)?;
                    self.grads[i] = Some(match self.grads[i].take() {
                        None => t,
                        Some(prev) => add_tensors(prev, &t),
                    });
                }
                op => {
                    let contribs = self.backward_op(op, &g, i);
                    for (parent, grad) in contribs {
                        if !self.nodes[parent.0].requires {
                            continue;
                        }
                        match &mut flows[parent.0] {
                            Some(acc) => {
                                for (a, v) in acc.iter_mut().zip(grad.iter()) {
                                    *a = *a + *v;
                                }
                            }
                            slot => *slot = Some(grad),
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Gradient of the most recent backward pass for a leaf, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&Tensor<E>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient or a zero tensor for unreachable leaves.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<E> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.nodes[v.0].value.shape().to_vec()),
        }
    }

    /// Vector-Jacobian product of one op. Returns (parent, contribution) pairs.
    fn backward_op(&self, op: &Op<E>, g: &[E], node: usize) -> Vec<(Var, Vec<E>)> {
        let out_val = &self.nodes[node].value;
        match op {
            Op::Leaf => Vec::new(),
            Op::Matmul {
                a,
                b,
                batch,
                m,
                k,
                n,
                b_batched,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let mut out = Vec::new();
                if self.nodes[a.0].requires {
                    // dA[p] = dOut[p] . B[p]^T
                    let mut da = vec![E::zero(); batch * m * k];
                    for p in 0..batch {
                        let b_base = if *b_batched { p * k * n } else { 0 };
                        for i in 0..m {
                            let grow = &g[(p * m + i) * n..(p * m + i + 1) * n];
                            let drow = &mut da[(p * m + i) * k..(p * m + i + 1) * k];
                            for (kk, d) in drow.iter_mut().enumerate() {
                                let brow = &bv[b_base + kk * n..b_base + (kk + 1) * n];
                                let mut acc = E::zero();
                                for (&gv, &bvv) in grow.iter().zip(brow.iter()) {
                                    acc = acc + gv * bvv;
                                }
                                *d = acc;
                            }
                        }
                    }
                    out.push((*a, da));
                }
                if self.nodes[b.0].requires {
                    // dB[p] = A[p]^T . dOut[p]; shared B sums over p.
                    let span = if *b_batched { batch * k * n } else { k * n };
                    let mut db = vec![E::zero(); span];
                    for p in 0..batch {
                        let d_base = if *b_batched { p * k * n } else { 0 };
                        for i in 0..m {
                            let arow = &av[(p * m + i) * k..(p * m + i + 1) * k];
                            let grow = &g[(p * m + i) * n..(p * m + i + 1) * n];
                            for (kk, &aik) in arow.iter().enumerate() {
                                let drow = &mut db[d_base + kk * n..d_base + (kk + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow.iter()) {
                                    *d = *d + aik * gv;
                                }
                            }
                        }
                    }
                    out.push((*b, db));
                }
                out
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBcast { a, b } => {
                let span = self.nodes[b.0].value.numel();
                let mut db = vec![E::zero(); span];
                for (i, &gv) in g.iter().enumerate() {
                    db[i % span] = db[i % span] + gv;
                }
                vec![(*a, g.to_vec()), (*b, db)]
            }
            Op::Mul { a, b } => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let da = kernels::binary_zip(g, bv, |gv, v| gv * v);
                let db = kernels::binary_zip(g, av, |gv, v| gv * v);
                vec![(*a, da), (*b, db)]
            }
            Op::Scale { x, c } => {
                let c = *c;
                vec![(*x, kernels::unary_map(g, |gv| gv * c))]
            }
            Op::Relu { x } => {
                let xv = self.nodes[x.0].value.data();
                let zero = E::zero();
                let dx = kernels::binary_zip(g, xv, |gv, v| if v > zero { gv } else { zero });
                vec![(*x, dx)]
            }
            Op::Sigmoid { x } => {
                let yv = out_val.data();
                let dx = kernels::binary_zip(g, yv, |gv, y| gv * y * (E::one() - y));
                vec![(*x, dx)]
            }
            Op::SoftmaxLast { x, cols } => {
                let yv = out_val.data();
                let mut dx = vec![E::zero(); g.len()];
                for ((grow, yrow), drow) in g
                    .chunks(*cols)
                    .zip(yv.chunks(*cols))
                    .zip(dx.chunks_mut(*cols))
                {
                    let mut dot = E::zero();
                    for (&gv, &yvv) in grow.iter().zip(yrow.iter()) {
                        dot = dot + gv * yvv;
                    }
                    for ((d, &gv), &yvv) in drow.iter_mut().zip(grow.iter()).zip(yrow.iter()) {
                        *d = yvv * (gv - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                c,
                eps,
            } => {
                let c = *c;
                let xv = self.nodes[x.0].value.data();
                let gv = self.nodes[gamma.0].value.data();
                let inv_c = E::one() / E::from_f64(c as f64);
                let mut dx = vec![E::zero(); xv.len()];
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                for ((xrow, grow), drow) in xv.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let (mean, rstd) = row_moments(xrow, *eps);
                    let mut m1 = E::zero();
                    let mut m2 = E::zero();
                    for ((&xi, &gi), &gam) in xrow.iter().zip(grow.iter()).zip(gv.iter()) {
                        let xhat = (xi - mean) * rstd;
                        let dyg = gi * gam;
                        m1 = m1 + dyg;
                        m2 = m2 + dyg * xhat;
                    }
                    m1 = m1 * inv_c;
                    m2 = m2 * inv_c;
                    for (j, (d, (&xi, &gi))) in drow
                        .iter_mut()
                        .zip(xrow.iter().zip(grow.iter()))
                        .enumerate()
                    {
                        let xhat = (xi - mean) * rstd;
                        let dyg = gi * gv[j];
                        *d = rstd * (dyg - m1 - xhat * m2);
                        dgamma[j] = dgamma[j] + gi * xhat;
                        dbeta[j] = dbeta[j] + gi;
                    }
                }
                vec![(*x, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::BceWithLogits { logits, labels } => {
                let zv = self.nodes[logits.0].value.data();
                let scale = g[0] / E::from_f64(zv.len() as f64);
                let dz: Vec<E> = zv
                    .iter()
                    .zip(labels.iter())
                    .map(|(&z, &y)| (kernels::sigmoid(z) - y) * scale)
                    .collect();
                vec![(*logits, dz)]
            }
            Op::Sum { x } => {
                let numel = self.nodes[x.0].value.numel();
                vec![(*x, vec![g[0]; numel])]
            }
            Op::MeanMiddle { x, t, c } => {
                let (t, c) = (*t, *c);
                let b = g.len() / c;
                let inv_t = E::one() / E::from_f64(t as f64);
                let mut dx = vec![E::zero(); b * t * c];
                for bi in 0..b {
                    let grow = &g[bi * c..(bi + 1) * c];
                    for ti in 0..t {
                        let drow = &mut dx[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                        for (d, &gvv) in drow.iter_mut().zip(grow.iter()) {
                            *d = gvv * inv_t;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Gather { x, map } => {
                let numel = self.nodes[x.0].value.numel();
                let mut dx = vec![E::zero(); numel];
                match &map.inverse {
                    Some(inv) => kernels::scatter_bijective(g, inv, &mut dx),
                    None => kernels::scatter_add(g, &map.idx, &mut dx),
                }
                vec![(*x, dx)]
            }
            Op::ConcatLast {
                a,
                b,
                a_cols,
                b_cols,
            } => {
                let (ac, bc) = (*a_cols, *b_cols);
                let rows = g.len() / (ac + bc);
                let mut da = vec![E::zero(); rows * ac];
                let mut db = vec![E::zero(); rows * bc];
                for r in 0..rows {
                    let grow = &g[r * (ac + bc)..(r + 1) * (ac + bc)];
                    da[r * ac..(r + 1) * ac].copy_from_slice(&grow[..ac]);
                    db[r * bc..(r + 1) * bc].copy_from_slice(&grow[ac..]);
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
        }
    }
}

/// Mean and reciprocal standard deviation (biased variance) of one row.
#[inline]
fn row_moments<E: Element>(row: &[E], eps: E) -> (E, E) {
    let inv_c = E::one() / E::from_f64(row.len() as f64);
    let mut mean = E::zero();
    for &v in row {
        mean = mean + v;
    }
    mean = mean * inv_c;
    let mut var = E::zero();
    for &v in row {
        let d = v - mean;
        var = var + d * d;
    }
    var = var * inv_c;
    (mean, E::one() / (var + eps).sqrt())
}

fn add_tensors<E: Element>(mut a: Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    for (x, y) in a.data_mut().iter_mut().zip(b.data().iter()) {
        *x = *x + *y;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), vals.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.leaf(Tensor::eye(2)).unwrap();
        let a = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let prod = tape.matmul(i2, a).unwrap();
        assert_eq!(tape.value(prod).data(), &[1.0, 2.0, 3.0, 4.0]);

        let row = tape.leaf(t64(&[1, 2], &[1.0, 2.0])).unwrap();
        let col = tape.leaf(t64(&[2, 1], &[3.0, 4.0])).unwrap();
        let out = tape.matmul(row, col).unwrap();
        assert_eq!(tape.value(out).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::zeros(vec![2, 3])).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![4, 2])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn softmax_trivial_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.softmax_last(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let big = tape.leaf(t64(&[2], &[1000.0, 1000.0])).unwrap();
        let yb = tape.softmax_last(big).unwrap();
        assert_eq!(tape.value(yb).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let y = tape.softmax_last(x).unwrap();
        let exps: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let sum: f64 = exps.iter().sum();
        for (got, want) in tape.value(y).data().iter().zip(exps.iter()) {
            assert!((got - want / sum).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_two_point_standardization() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 2], &[1.0, 3.0])).unwrap();
        let g = tape.leaf(t64(&[2], &[1.0, 1.0])).unwrap();
        let b = tape.leaf(t64(&[2], &[0.0, 0.0])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        assert!(
            (d[0] + 1.0).abs() < 1e-6 && (d[1] - 1.0).abs() < 1e-6,
            "{d:?}"
        );
    }

    #[test]
    fn layer_norm_centers_channels() {
        // random rows: per-position channel mean of the pre-affine output
        // stays below 1e-10
        let mut state = 0x243f6a8885a308d3u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        };
        let (rows, c) = (8usize, 8usize);
        let data: Vec<f64> = (0..rows * c).map(|_| next()).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[rows, c], &data)).unwrap();
        let g = tape.leaf(Tensor::full(vec![c], 1.0)).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![c])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            assert!(mean.abs() < 1e-10, "channel mean {mean}");
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[1, 4], &[5.0; 4])).unwrap();
        let g = tape.leaf(t64(&[4], &[1.0; 4])).unwrap();
        let b = tape.leaf(t64(&[4], &[0.0; 4])).unwrap();
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_and_sigmoid_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let z = tape.leaf(t64(&[2], &[0.0, -745.0])).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[0], 0.5);
        assert!(d[1] > 0.0 && d[1].is_finite());
    }

    #[test]
    fn bce_symmetric_point_is_ln2() {
        let mut tape = Tape::new();
        let z = tape.leaf(t64(&[1], &[0.0])).unwrap();
        let l1 = tape.bce_with_logits(z, &t64(&[1], &[1.0])).unwrap();
        let l0 = tape.bce_with_logits(z, &t64(&[1], &[0.0])).unwrap();
        let ln2 = std::f64::consts::LN_2;
        assert!((tape.value(l1).item().unwrap() - ln2).abs() < 1e-15);
        assert!((tape.value(l0).item().unwrap() - ln2).abs() < 1e-15);
    }

    #[test]
    fn bce_matches_two_step_oracle() {
        // Separate sigmoid-then-log evaluation at a mild logit.
        let mut tape = Tape::new();
        let z = tape.leaf(t64(&[1], &[2.0])).unwrap();
        let loss = tape.bce_with_logits(z, &t64(&[1], &[1.0])).unwrap();
        let oracle = -(1.0f64 / (1.0 + (-2.0f64).exp())).ln();
        assert!((tape.value(loss).item().unwrap() - oracle).abs() < 1e-10);
    }

    #[test]
    fn bce_rejects_bad_labels() {
        let mut tape = Tape::new();
        let z = tape.leaf(t64(&[1], &[0.0])).unwrap();
        assert!(tape.bce_with_logits(z, &t64(&[1], &[0.5])).is_err());
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(&t64(&[3], &[1.0, 2.0, 3.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(&t64(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(&t64(&[2], &[1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut tape = Tape::new();
        let x = tape.param(&t64(&[2], &[1.0, 2.0]));
        let y = tape.param(&t64(&[2], &[5.0, 6.0]));
        let loss = tape.sum(x).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(y).is_none());
        assert_eq!(tape.grad_or_zeros(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn gather_round_trip_is_bitwise() {
        let mut tape = Tape::new();
        let x = tape.param(&t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
        let map = GatherMap::bijective(vec![2, 0, 3, 1], vec![4]);
        let inv_map = GatherMap::bijective(vec![1, 3, 0, 2], vec![4]);
        let y = tape.gather(x, map).unwrap();
        let z = tape.gather(y, inv_map).unwrap();
        assert_eq!(tape.value(z).data(), tape.value(x).data());
        let loss = tape.sum(z).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn leaf_rejects_non_finite_input() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.leaf(t64(&[1], &[f64::NAN])).is_err());
    }

    #[test]
    fn affine_identity_passes_through() {
        let mut tape = Tape::new();
        let x = tape.leaf(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let w = tape.leaf(Tensor::eye(2)).unwrap();
        let b = tape.leaf(Tensor::zeros(vec![2])).unwrap();
        let y = tape.affine(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn purity_same_inputs_bitwise_same_outputs() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape
                .leaf(t64(&[2, 3], &[0.3, -1.2, 2.5, 0.0, 9.1, -4.2]))
                .unwrap();
            let s = tape.softmax_last(x).unwrap();
            tape.value(s).data().to_vec()
        };
        assert_eq!(run(), run());
    }
}
