//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Leaves
//! created with [`Tape::leaf`] are tracked; leaves created with
//! [`Tape::constant`] are not, and any node whose inputs are all untracked is
//! itself untracked and skipped during the backward sweep.
//!
//! Broadcasting rule for binary elementwise ops: the right operand either has
//! the same shape as the left, holds a single element (scalar broadcast), or
//! has a shape equal to the trailing dimensions of the left (row broadcast,
//! used for biases). The left operand never broadcasts.
//!
//! [`Tape::backward`] accumulates into per-leaf gradient buffers: calling it
//! twice without [`Tape::zero_grad`] doubles the stored gradients.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Identifies a model whose forward pass was recorded on a tape.
pub type ModelId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryKind, usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Relu(usize),
    Tanh(usize),
    Square(usize),
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    SoftmaxRows {
        a: usize,
        cols: usize,
    },
    Sum(usize),
    Mean(usize),
    L2Norm(usize),
    Cosine {
        a: usize,
        b: usize,
        norm_a: f64,
        norm_b: f64,
    },
    NormalizeRows {
        a: usize,
        cols: usize,
        norms: Vec<f64>,
    },
    Reshape(usize),
    Concat(Vec<usize>),
    Slice {
        a: usize,
        offset: usize,
    },
    Gather {
        a: usize,
        index: Rc<Vec<usize>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    tracked: bool,
    op: Op,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    models: BTreeSet<ModelId>,
}

/// Append-only record of operations.
pub struct Tape {
    id: u64,
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("tape", &self.tape.id)
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(TapeInner::default()),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tracked leaf: receives a gradient on [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Untracked leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    /// Records that `model` contributed to this tape.
    pub fn touch_model(&self, model: ModelId) {
        self.inner.borrow_mut().models.insert(model);
    }

    pub fn touched_models(&self) -> BTreeSet<ModelId> {
        self.inner.borrow().models.clone()
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, var: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let shape = inner.nodes.get(var.id)?.value.shape().to_vec();
        inner
            .leaf_grads
            .get(&var.id)
            .map(|g| Tensor::new(&shape, g.clone()).expect("gradient shape"))
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().leaf_grads.clear();
    }

    fn push(&self, value: Tensor, tracked: bool, op: Op) -> Var<'_> {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, tracked, op });
        Var {
            tape: self,
            id: inner.nodes.len() - 1,
        }
    }

    fn check_owner(&self, v: Var<'_>) -> Result<()> {
        if v.tape.id != self.id {
            return Err(Error::ForeignVariable);
        }
        Ok(())
    }

    /// Propagates d(loss)/d(leaf) into every tracked leaf's buffer.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        self.check_owner(loss)?;
        let mut inner = self.inner.borrow_mut();
        let TapeInner {
            nodes, leaf_grads, ..
        } = &mut *inner;
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.value.shape().to_vec()));
        }
        if !root.tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.tracked {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    let buf = leaf_grads.entry(i).or_insert_with(|| vec![0.0; g.len()]);
                    for (b, v) in buf.iter_mut().zip(&g) {
                        *b += v;
                    }
                }
                Op::Binary(kind, a, b) => {
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let blen = bv.len();
                    if nodes[*a].tracked {
                        let ga: Vec<f64> = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.clone(),
                            BinaryKind::Mul => g
                                .iter()
                                .enumerate()
                                .map(|(j, gv)| gv * bv[j % blen])
                                .collect(),
                            BinaryKind::Div => g
                                .iter()
                                .enumerate()
                                .map(|(j, gv)| gv / bv[j % blen])
                                .collect(),
                        };
                        accumulate(&mut grads, nodes, *a, ga);
                    }
                    if nodes[*b].tracked {
                        let mut gb = vec![0.0; blen];
                        for (j, gv) in g.iter().enumerate() {
                            let bj = j % blen;
                            gb[bj] += match kind {
                                BinaryKind::Add => *gv,
                                BinaryKind::Sub => -gv,
                                BinaryKind::Mul => gv * av[j],
                                BinaryKind::Div => -gv * av[j] / (bv[bj] * bv[bj]),
                            };
                        }
                        accumulate(&mut grads, nodes, *b, gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads, nodes, *a, g),
                Op::Neg(a) => {
                    let ga = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::Relu(a) => {
                    let x = nodes[*a].value.data();
                    let ga = g
                        .iter()
                        .zip(x)
                        .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = g
                        .iter()
                        .zip(y)
                        .map(|(gv, yv)| gv * (1.0 - yv * yv))
                        .collect();
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::Square(a) => {
                    let x = nodes[*a].value.data();
                    let ga = g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect();
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    if nodes[*a].tracked {
                        let mut ga = vec![0.0; m * k];
                        gemm(
                            m,
                            n,
                            k,
                            &g,
                            false,
                            nodes[*b].value.data(),
                            true,
                            &mut ga,
                            false,
                        );
                        accumulate(&mut grads, nodes, *a, ga);
                    }
                    if nodes[*b].tracked {
                        let mut gb = vec![0.0; k * n];
                        gemm(
                            k,
                            m,
                            n,
                            nodes[*a].value.data(),
                            true,
                            &g,
                            false,
                            &mut gb,
                            false,
                        );
                        accumulate(&mut grads, nodes, *b, gb);
                    }
                }
                Op::Transpose { a, rows, cols } => {
                    // output is cols×rows; map back to rows×cols
                    let mut ga = vec![0.0; rows * cols];
                    for r in 0..*rows {
                        for c in 0..*cols {
                            ga[r * cols + c] = g[c * rows + r];
                        }
                    }
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::SoftmaxRows { a, cols } => {
                    let mut ga = vec![0.0; g.len()];
                    for ((gr, yr), out) in g
                        .chunks(*cols)
                        .zip(y.chunks(*cols))
                        .zip(ga.chunks_mut(*cols))
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    accumulate(&mut grads, nodes, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    accumulate(&mut grads, nodes, *a, vec![g[0] / n as f64; n]);
                }
                Op::L2Norm(a) => {
                    let norm = y[0];
                    let x = nodes[*a].value.data();
                    let ga = if norm > 0.0 {
                        x.iter().map(|xv| g[0] * xv / norm).collect()
                    } else {
                        vec![0.0; x.len()]
                    };
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::Cosine {
                    a,
                    b,
                    norm_a,
                    norm_b,
                } => {
                    let c = y[0];
                    let av = nodes[*a].value.data();
                    let bv = nodes[*b].value.data();
                    let inv = 1.0 / (norm_a * norm_b);
                    if nodes[*a].tracked {
                        let ga = av
                            .iter()
                            .zip(bv)
                            .map(|(x, z)| g[0] * (z * inv - c * x / (norm_a * norm_a)))
                            .collect();
                        accumulate(&mut grads, nodes, *a, ga);
                    }
                    if nodes[*b].tracked {
                        let gb = av
                            .iter()
                            .zip(bv)
                            .map(|(x, z)| g[0] * (x * inv - c * z / (norm_b * norm_b)))
                            .collect();
                        accumulate(&mut grads, nodes, *b, gb);
                    }
                }
                Op::NormalizeRows { a, cols, norms } => {
                    let mut ga = vec![0.0; g.len()];
                    for (r, ((gr, yr), out)) in g
                        .chunks(*cols)
                        .zip(y.chunks(*cols))
                        .zip(ga.chunks_mut(*cols))
                        .enumerate()
                    {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..*cols {
                            out[j] = (gr[j] - yr[j] * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        if nodes[p].tracked {
                            accumulate(&mut grads, nodes, p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::Slice { a, offset } => {
                    let mut ga = vec![0.0; nodes[*a].value.len()];
                    ga[*offset..*offset + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::Gather { a, index } => {
                    let mut ga = vec![0.0; nodes[*a].value.len()];
                    for (gv, &src) in g.iter().zip(index.iter()) {
                        ga[src] += gv;
                    }
                    accumulate(&mut grads, nodes, *a, ga);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let rows = labels.len();
                    let cols = probs.len() / rows;
                    let scale = g[0] / rows as f64;
                    let mut ga: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &l) in labels.iter().enumerate() {
                        ga[r * cols + l] -= scale;
                    }
                    accumulate(&mut grads, nodes, *logits, ga);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], idx: usize, g: Vec<f64>) {
    if !nodes[idx].tracked {
        return;
    }
    match &mut grads[idx] {
        Some(existing) => {
            for (e, v) in existing.iter_mut().zip(&g) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id]
            .value
            .shape()
            .to_vec()
    }

    pub fn len(&self) -> usize {
        self.tape.inner.borrow().nodes[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.inner.borrow().nodes[self.id].tracked
    }

    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.data()[0]
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn same_tape(&self, other: Var<'_>) -> Result<()> {
        self.tape.check_owner(other)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let tracked = self.is_tracked();
        self.tape.push(value, tracked, op)
    }

    fn binary(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let (ash, bsh) = (a.shape(), b.shape());
            let broadcast_ok =
                ash == bsh || b.len() == 1 || (bsh.len() <= ash.len() && ash.ends_with(bsh));
            if !broadcast_ok {
                return Err(Error::ShapeMismatch {
                    op: "elementwise",
                    left: ash.to_vec(),
                    right: bsh.to_vec(),
                });
            }
            let bv = b.data();
            if kind == BinaryKind::Div {
                if let Some(index) = bv.iter().position(|&v| v == 0.0) {
                    return Err(Error::DivisionByZero { index });
                }
            }
            let blen = bv.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(j, &x)| {
                    let z = bv[j % blen];
                    match kind {
                        BinaryKind::Add => x + z,
                        BinaryKind::Sub => x - z,
                        BinaryKind::Mul => x * z,
                        BinaryKind::Div => x / z,
                    }
                })
                .collect();
            Tensor::new(ash, data)?
        };
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self
            .tape
            .push(value, tracked, Op::Binary(kind, self.id, other.id)))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.with_value(|x| x.map(|a| a * c));
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let v = self.with_value(|x| x.map(|a| a + c));
        self.unary(v, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var<'t> {
        let v = self.with_value(|x| x.map(|a| -a));
        self.unary(v, Op::Neg(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.with_value(|x| x.map(|a| a.max(0.0)));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        let v = self.with_value(|x| x.map(f64::tanh));
        self.unary(v, Op::Tanh(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        let v = self.with_value(|x| x.map(|a| a * a));
        self.unary(v, Op::Square(self.id))
    }

    /// Matrix product of `m×k` and `k×n` operands.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (ash, bsh) = (self.shape(), other.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: ash,
                right: bsh,
            });
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let mut out = vec![0.0; m * n];
        {
            let inner = self.tape.inner.borrow();
            gemm(
                m,
                k,
                n,
                inner.nodes[self.id].value.data(),
                false,
                inner.nodes[other.id].value.data(),
                false,
                &mut out,
                false,
            );
        }
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.tape.push(
            Tensor::new(&[m, n], out)?,
            tracked,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
            },
        ))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        let sh = self.shape();
        if sh.len() != 2 {
            return Err(Error::invalid(format!("transpose expects 2-D, got {sh:?}")));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let v = self.with_value(|x| {
            let d = x.data();
            let mut out = vec![0.0; d.len()];
            for r in 0..rows {
                for c in 0..cols {
                    out[c * rows + r] = d[r * cols + c];
                }
            }
            Tensor::new(&[cols, rows], out)
        })?;
        Ok(self.unary(
            v,
            Op::Transpose {
                a: self.id,
                rows,
                cols,
            },
        ))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&self) -> Result<Var<'t>> {
        let sh = self.shape();
        let cols = *sh.last().expect("non-empty shape");
        let v = self.with_value(|x| Tensor::new(&sh, softmax_rows(x.data(), cols)))?;
        Ok(self.unary(v, Op::SoftmaxRows { a: self.id, cols }))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = self.with_value(|x| Tensor::scalar(x.data().iter().sum()));
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.with_value(|x| Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64));
        self.unary(v, Op::Mean(self.id))
    }

    pub fn l2_norm(&self) -> Var<'t> {
        let v = self.with_value(|x| Tensor::scalar(x.l2_norm()));
        self.unary(v, Op::L2Norm(self.id))
    }

    /// Cosine similarity of two equally sized tensors, read as flat vectors.
    pub fn cosine_sim(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other)?;
        let (value, norm_a, norm_b) = {
            let inner = self.tape.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            cosine_parts(a.data(), b.data(), a.shape(), b.shape())?
        };
        let tracked = self.is_tracked() || other.is_tracked();
        Ok(self.tape.push(
            Tensor::scalar(value),
            tracked,
            Op::Cosine {
                a: self.id,
                b: other.id,
                norm_a,
                norm_b,
            },
        ))
    }

    /// Scales every row (last axis) to unit L2 norm.
    pub fn normalize_rows(&self) -> Result<Var<'t>> {
        let sh = self.shape();
        let cols = *sh.last().expect("non-empty shape");
        let (v, norms) = self.with_value(|x| {
            let mut out = x.data().to_vec();
            let mut norms = Vec::with_capacity(out.len() / cols);
            for row in out.chunks_mut(cols) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < 1e-12 {
                    return Err(Error::ZeroNorm {
                        op: "normalize_rows",
                        arg: "input",
                        norm: n,
                    });
                }
                row.iter_mut().for_each(|v| *v /= n);
                norms.push(n);
            }
            Ok((Tensor::new(&sh, out)?, norms))
        })?;
        Ok(self.unary(
            v,
            Op::NormalizeRows {
                a: self.id,
                cols,
                norms,
            },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Contiguous run of `count` entries along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Var<'t>> {
        let sh = self.shape();
        if count == 0 || start + count > sh[0] {
            return Err(Error::invalid(format!(
                "slice {start}..{} out of bounds for leading dim {}",
                start + count,
                sh[0]
            )));
        }
        let row: usize = sh[1..].iter().product();
        let mut new_shape = sh.clone();
        new_shape[0] = count;
        let v = self.with_value(|x| {
            Tensor::new(
                &new_shape,
                x.data()[start * row..(start + count) * row].to_vec(),
            )
        })?;
        Ok(self.unary(
            v,
            Op::Slice {
                a: self.id,
                offset: start * row,
            },
        ))
    }

    /// Builds a tensor of `shape` with `out[i] = self.flat[index[i]]`.
    pub fn gather(&self, index: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>> {
        let n = self.len();
        if let Some(bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!("gather index {bad} >= {n}")));
        }
        let v = self.with_value(|x| {
            let d = x.data();
            Tensor::new(shape, index.iter().map(|&i| d[i]).collect())
        })?;
        Ok(self.unary(v, Op::Gather { a: self.id, index }))
    }

    /// Mean softmax cross-entropy of `rows×classes` logits against labels.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let sh = self.shape();
        if sh.len() != 2 || sh[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: sh,
                right: vec![labels.len()],
            });
        }
        let cols = sh[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::invalid(format!("label {bad} >= {cols} classes")));
        }
        let probs = self.with_value(|x| softmax_rows(x.data(), cols));
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -probs[r * cols + l].max(1e-300).ln())
            .sum::<f64>()
            / labels.len() as f64;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }
}

/// Concatenates along the leading axis; trailing dims must agree.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let tape = first.tape;
    let sh0 = first.shape();
    let mut lead = 0;
    let mut data = Vec::new();
    let mut tracked = false;
    for p in parts {
        tape.check_owner(*p)?;
        let sh = p.shape();
        if sh[1..] != sh0[1..] {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: sh0,
                right: sh,
            });
        }
        lead += sh[0];
        tracked |= p.is_tracked();
        p.with_value(|x| data.extend_from_slice(x.data()));
    }
    let mut shape = sh0;
    shape[0] = lead;
    Ok(tape.push(
        Tensor::new(&shape, data)?,
        tracked,
        Op::Concat(parts.iter().map(|p| p.id).collect()),
    ))
}

pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            s += *v;
        }
        row.iter_mut().for_each(|v| *v /= s);
    }
    out
}

fn cosine_parts(a: &[f64], b: &[f64], ash: &[usize], bsh: &[usize]) -> Result<(f64, f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_sim",
            left: ash.to_vec(),
            right: bsh.to_vec(),
        });
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    for (arg, norm) in [("a", na), ("b", nb)] {
        if norm < 1e-12 {
            return Err(Error::ZeroNorm {
                op: "cosine_sim",
                arg,
                norm,
            });
        }
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(((dot / (na * nb)).clamp(-1.0, 1.0), na, nb))
}

/// Softmax of a plain vector.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    Ok(softmax_rows(v, v.len()))
}

/// Cosine similarity of two plain vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_parts(a, b, &[a.len()], &[b.len()]).map(|(c, _, _)| c)
}
