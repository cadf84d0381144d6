use std::cell::RefCell;
use std::sync::Arc;

use super::{axis_split, Tensor};
use crate::error::{Error, Result};

/// Append-only record of one forward computation.
///
/// Node `i` only ever reads nodes `< i`, so the vector order is already a
/// topological order and `backward` is a single reverse sweep.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    guard: bool,
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Sigmoid,
    Tanh,
    Relu,
    /// Tanh approximation of the Gaussian error linear unit.
    Gelu,
    Log,
    Exp,
    Neg,
    Sqrt,
    /// `x ln x` with the `0 ln 0 = 0` convention; derivative taken as 0 at 0.
    XLogX,
}

#[derive(Clone, Copy, Debug)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum ReduceOp {
    Sum,
    Mean,
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Binary { op: BinaryOp, lhs: usize, rhs: usize },
    Unary { op: UnaryOp, x: usize },
    Scale { x: usize, factor: f64 },
    AddScalar(usize),
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    Reduce { op: ReduceOp, x: usize, axis: usize },
    SumAll(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Expand(usize),
    Affine { x: usize, w: usize, b: usize },
    GatherRows { x: usize, rows: Vec<usize> },
    SegmentMean { x: usize, groups: Vec<Vec<usize>> },
    PickCols { x: usize, cols: Vec<usize> },
    Lerp { start: usize, end: usize, weight: usize },
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::with_capacity(1024)), guard: false }
    }

    /// A tape that rejects non-finite results of domain-sensitive operations.
    pub fn with_guard(guard: bool) -> Self {
        Self { guard, ..Self::new() }
    }

    pub fn guarded(&self) -> bool {
        self.guard
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, true)
    }

    /// Shared leaf that receives a gradient; the tensor is not copied.
    pub fn leaf_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation (data, masks).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(Arc::new(value), Op::Leaf, false)
    }

    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(Error::Axis { op: "concat", axis, shape: vec![] })?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|v| v.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::Axis { op: "concat", axis, shape: base });
        }
        let mut total = 0;
        for v in &values {
            let s = v.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Dimension { op: "concat", lhs: base, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let block = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * block..(o + 1) * block]);
            }
        }
        let inputs = parts.iter().map(|p| p.id).collect();
        Ok(first.derive(Tensor::new(shape, data)?, Op::Concat { inputs, axis }))
    }

    fn push(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, requires_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root_value = &nodes[root.id].value;
        if root_value.len() != 1 {
            return Err(Error::Dimension { op: "backward", lhs: root_value.shape().to_vec(), rhs: vec![1] });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[root.id] = Some(vec![1.0]);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let y = &node.value;
            let val = |i: usize| nodes[i].value.as_ref();
            let needs = |i: usize| nodes[i].requires_grad;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if needs(*a) {
                        matmul_nt_acc(&g, bv.data(), m, n, k, slot(&mut grads, *a, av.len()));
                    }
                    if needs(*b) {
                        matmul_tn_acc(av.data(), &g, m, k, n, slot(&mut grads, *b, bv.len()));
                    }
                }
                Op::Transpose(x) => {
                    if needs(*x) {
                        let (r, c) = (y.rows(), y.cols());
                        let gx = slot(&mut grads, *x, y.len());
                        for i in 0..r {
                            for j in 0..c {
                                gx[j * r + i] += g[i * c + j];
                            }
                        }
                    }
                }
                Op::Binary { op, lhs, rhs } => {
                    let (av, bv) = (val(*lhs), val(*rhs));
                    let ia = index_map(y.shape(), av.shape());
                    let ib = index_map(y.shape(), bv.shape());
                    let (a, b) = (av.data(), bv.data());
                    if needs(*lhs) {
                        let ga = slot(&mut grads, *lhs, a.len());
                        for i in 0..g.len() {
                            let (pa, pb) = (ia.at(i), ib.at(i));
                            ga[pa] += match op {
                                BinaryOp::Add | BinaryOp::Sub => g[i],
                                BinaryOp::Mul => g[i] * b[pb],
                                BinaryOp::Div => g[i] / b[pb],
                            };
                        }
                    }
                    if needs(*rhs) {
                        let gb = slot(&mut grads, *rhs, b.len());
                        for i in 0..g.len() {
                            let (pa, pb) = (ia.at(i), ib.at(i));
                            gb[pb] += match op {
                                BinaryOp::Add => g[i],
                                BinaryOp::Sub => -g[i],
                                BinaryOp::Mul => g[i] * a[pa],
                                BinaryOp::Div => -g[i] * a[pa] / (b[pb] * b[pb]),
                            };
                        }
                    }
                }
                Op::Unary { op, x } => {
                    if needs(*x) {
                        let xv = val(*x).data();
                        let yv = y.data();
                        let gx = slot(&mut grads, *x, xv.len());
                        for i in 0..g.len() {
                            gx[i] += g[i] * unary_derivative(*op, xv[i], yv[i]);
                        }
                    }
                }
                Op::Scale { x, factor } => {
                    if needs(*x) {
                        let gx = slot(&mut grads, *x, g.len());
                        for (d, s) in gx.iter_mut().zip(&g) {
                            *d += s * factor;
                        }
                    }
                }
                Op::AddScalar(x) => {
                    if needs(*x) {
                        add_into(slot(&mut grads, *x, g.len()), &g);
                    }
                }
                Op::Softmax { x, axis } => {
                    if needs(*x) {
                        let (outer, n, inner) = axis_split(y.shape(), *axis);
                        let yv = y.data();
                        let gx = slot(&mut grads, *x, yv.len());
                        for o in 0..outer {
                            for k in 0..inner {
                                let at = |i: usize| (o * n + i) * inner + k;
                                let dot: f64 = (0..n).map(|i| yv[at(i)] * g[at(i)]).sum();
                                for i in 0..n {
                                    gx[at(i)] += yv[at(i)] * (g[at(i)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, axis } => {
                    if needs(*x) {
                        let (outer, n, inner) = axis_split(y.shape(), *axis);
                        let yv = y.data();
                        let gx = slot(&mut grads, *x, yv.len());
                        for o in 0..outer {
                            for k in 0..inner {
                                let at = |i: usize| (o * n + i) * inner + k;
                                let total: f64 = (0..n).map(|i| g[at(i)]).sum();
                                for i in 0..n {
                                    gx[at(i)] += g[at(i)] - yv[at(i)].exp() * total;
                                }
                            }
                        }
                    }
                }
                Op::Reduce { op, x, axis } => {
                    if needs(*x) {
                        let xs = val(*x).shape();
                        let (outer, n, inner) = axis_split(xs, *axis);
                        let w = match op {
                            ReduceOp::Sum => 1.0,
                            ReduceOp::Mean => 1.0 / n as f64,
                        };
                        let gx = slot(&mut grads, *x, outer * n * inner);
                        for o in 0..outer {
                            for i in 0..n {
                                for k in 0..inner {
                                    gx[(o * n + i) * inner + k] += w * g[o * inner + k];
                                }
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    if needs(*x) {
                        let n = val(*x).len();
                        for d in slot(&mut grads, *x, n).iter_mut() {
                            *d += g[0];
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, _, inner) = axis_split(y.shape(), *axis);
                    let mut offset = 0;
                    let row = y.shape()[*axis] * inner;
                    for &input in inputs {
                        let iv = val(input);
                        let block = iv.shape()[*axis] * inner;
                        if needs(input) {
                            let gi = slot(&mut grads, input, iv.len());
                            for o in 0..outer {
                                add_into(&mut gi[o * block..(o + 1) * block], &g[o * row + offset..o * row + offset + block]);
                            }
                        }
                        offset += block;
                    }
                }
                Op::Slice { x, axis, start } => {
                    if needs(*x) {
                        let xs = val(*x).shape();
                        let (outer, n, inner) = axis_split(xs, *axis);
                        let len = y.shape()[*axis];
                        let gx = slot(&mut grads, *x, outer * n * inner);
                        for o in 0..outer {
                            let src = &g[o * len * inner..(o + 1) * len * inner];
                            let dst = (o * n + start) * inner;
                            add_into(&mut gx[dst..dst + len * inner], src);
                        }
                    }
                }
                Op::Expand(x) => {
                    if needs(*x) {
                        let xv = val(*x);
                        let map = index_map(y.shape(), xv.shape());
                        let gx = slot(&mut grads, *x, xv.len());
                        for (i, gi) in g.iter().enumerate() {
                            gx[map.at(i)] += gi;
                        }
                    }
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (val(*x), val(*w));
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    if needs(*x) {
                        matmul_nt_acc(&g, wv.data(), m, n, k, slot(&mut grads, *x, xv.len()));
                    }
                    if needs(*w) {
                        matmul_tn_acc(xv.data(), &g, m, k, n, slot(&mut grads, *w, wv.len()));
                    }
                    if needs(*b) {
                        let gb = slot(&mut grads, *b, n);
                        for r in 0..m {
                            add_into(gb, &g[r * n..(r + 1) * n]);
                        }
                    }
                }
                Op::GatherRows { x, rows } => {
                    if needs(*x) {
                        let c = y.cols();
                        let gx = slot(&mut grads, *x, val(*x).len());
                        for (out, &src) in rows.iter().enumerate() {
                            add_into(&mut gx[src * c..(src + 1) * c], &g[out * c..(out + 1) * c]);
                        }
                    }
                }
                Op::SegmentMean { x, groups } => {
                    if needs(*x) {
                        let c = y.cols();
                        let gx = slot(&mut grads, *x, val(*x).len());
                        for (out, group) in groups.iter().enumerate() {
                            let w = 1.0 / group.len().max(1) as f64;
                            for &src in group {
                                for j in 0..c {
                                    gx[src * c + j] += w * g[out * c + j];
                                }
                            }
                        }
                    }
                }
                Op::Lerp { start, end, weight } => {
                    let (sv, ev, wv) = (val(*start), val(*end), val(*weight));
                    let map = index_map(y.shape(), wv.shape());
                    if needs(*start) {
                        let gs = slot(&mut grads, *start, sv.len());
                        for i in 0..g.len() {
                            gs[i] += g[i] * (1.0 - wv.data()[map.at(i)]);
                        }
                    }
                    if needs(*end) {
                        let ge = slot(&mut grads, *end, ev.len());
                        for i in 0..g.len() {
                            ge[i] += g[i] * wv.data()[map.at(i)];
                        }
                    }
                    if needs(*weight) {
                        let gw = slot(&mut grads, *weight, wv.len());
                        for i in 0..g.len() {
                            gw[map.at(i)] += g[i] * (ev.data()[i] - sv.data()[i]);
                        }
                    }
                }
                Op::PickCols { x, cols } => {
                    if needs(*x) {
                        let c = val(*x).cols();
                        let gx = slot(&mut grads, *x, val(*x).len());
                        for (r, &col) in cols.iter().enumerate() {
                            gx[r * c + col] += g[r];
                        }
                    }
                }
            }
        }

        let entries = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(g.unwrap_or_else(|| vec![0.0; node.value.len()])),
                _ => None,
            })
            .collect();
        Ok(Gradients { entries, shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    entries: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of a differentiable leaf; `None` for constants and interior nodes.
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Option<Tensor> {
        let data = self.entries.get(id)?.as_ref()?;
        Some(Tensor::new(self.shapes[id].clone(), data.clone()).expect("gradient shape"))
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], id: usize, len: usize) -> &mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn unary_value(op: UnaryOp, x: f64) -> f64 {
    match op {
        UnaryOp::Sigmoid => {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        }
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Relu => x.max(0.0),
        UnaryOp::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
        UnaryOp::Log => x.ln(),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Neg => -x,
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::XLogX => {
            if x == 0.0 {
                0.0
            } else {
                x * x.ln()
            }
        }
    }
}

fn unary_derivative(op: UnaryOp, x: f64, y: f64) -> f64 {
    match op {
        UnaryOp::Sigmoid => y * (1.0 - y),
        UnaryOp::Tanh => 1.0 - y * y,
        UnaryOp::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryOp::Gelu => {
            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
        }
        UnaryOp::Log => 1.0 / x,
        UnaryOp::Exp => y,
        UnaryOp::Neg => -1.0,
        UnaryOp::Sqrt => 0.5 / y,
        UnaryOp::XLogX => {
            if x > 0.0 {
                x.ln() + 1.0
            } else {
                0.0
            }
        }
    }
}

fn domain_sensitive(op: UnaryOp) -> bool {
    matches!(op, UnaryOp::Log | UnaryOp::Exp | UnaryOp::Sqrt | UnaryOp::XLogX)
}

/// Output-index to operand-index mapping under extent-1 broadcasting.
enum IndexMap {
    Identity,
    Table(Vec<usize>),
}

impl IndexMap {
    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            IndexMap::Identity => i,
            IndexMap::Table(t) => t[i],
        }
    }
}

fn index_map(out: &[usize], input: &[usize]) -> IndexMap {
    if out == input {
        return IndexMap::Identity;
    }
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if input[d] == 1 { 0 } else { acc };
        acc *= input[d];
    }
    let mut table = Vec::with_capacity(n);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        table.push(pos);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += strides[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= strides[d] * counter[d];
            counter[d] = 0;
        }
    }
    IndexMap::Table(table)
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let mismatch = || Error::Dimension { op, lhs: a.to_vec(), rhs: b.to_vec() };
    if a.len() != b.len() {
        return Err(mismatch());
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(mismatch()),
        })
        .collect()
}

/// out[m×n] = a[m×k] · b[k×n]
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += s * bv;
            }
        }
    }
}

/// da[m×k] += g[m×n] · bᵀ where b is [k×n].
fn matmul_nt_acc(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, da: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// db[k×n] += aᵀ · g where a is [m×k] and g is [m×n].
fn matmul_tn_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, db: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            if s == 0.0 {
                continue;
            }
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, gv) in drow.iter_mut().zip(grow) {
                *d += s * gv;
            }
        }
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<()> {
    if t.rank() != 2 {
        return Err(Error::Dimension { op, lhs: t.shape().to_vec(), rhs: vec![] });
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn derive(&self, value: Tensor, op: Op) -> Var<'t> {
        let nodes = self.tape.nodes.borrow();
        let rg = match &op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Binary { lhs: a, rhs: b, .. } => nodes[*a].requires_grad || nodes[*b].requires_grad,
            Op::Affine { x, w, b } => nodes[*x].requires_grad || nodes[*w].requires_grad || nodes[*b].requires_grad,
            Op::Concat { inputs, .. } => inputs.iter().any(|&i| nodes[i].requires_grad),
            Op::Transpose(x)
            | Op::Unary { x, .. }
            | Op::Scale { x, .. }
            | Op::AddScalar(x)
            | Op::Softmax { x, .. }
            | Op::LogSoftmax { x, .. }
            | Op::Reduce { x, .. }
            | Op::SumAll(x)
            | Op::Slice { x, .. }
            | Op::Expand(x)
            | Op::GatherRows { x, .. }
            | Op::SegmentMean { x, .. }
            | Op::PickCols { x, .. } => nodes[*x].requires_grad,
            Op::Lerp { start, end, weight } => {
                nodes[*start].requires_grad || nodes[*end].requires_grad || nodes[*weight].requires_grad
            }
        };
        drop(nodes);
        self.tape.push(Arc::new(value), op, rg)
    }

    fn check_nan(&self, op: &'static str, t: &Tensor) -> Result<()> {
        if self.tape.guard && t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite { op });
        }
        Ok(())
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        require_matrix("matmul", &a)?;
        require_matrix("matmul", &b)?;
        if a.cols() != b.rows() {
            return Err(Error::Dimension { op: "matmul", lhs: a.shape().to_vec(), rhs: b.shape().to_vec() });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        matmul_into(a.data(), b.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.check_nan("matmul", &t)?;
        Ok(self.derive(t, Op::MatMul(self.id, other.id)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let a = self.value();
        require_matrix("transpose", &a)?;
        let (r, c) = (a.rows(), a.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        Ok(self.derive(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id)))
    }

    fn binary(self, other: Var<'t>, op: BinaryOp, name: &'static str) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(name, a.shape(), b.shape())?;
        let ia = index_map(&shape, a.shape());
        let ib = index_map(&shape, b.shape());
        let n: usize = shape.iter().product();
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (ad[ia.at(i)], bd[ib.at(i)]);
                match op {
                    BinaryOp::Add => x + y,
                    BinaryOp::Sub => x - y,
                    BinaryOp::Mul => x * y,
                    BinaryOp::Div => x / y,
                }
            })
            .collect();
        let t = Tensor::new(shape, out)?;
        if self.tape.guard && matches!(op, BinaryOp::Div) && t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        self.check_nan(name, &t)?;
        Ok(self.derive(t, Op::Binary { op, lhs: self.id, rhs: other.id }))
    }

    /// Elementwise sum with extent-1 broadcasting along any axis of equal-rank operands.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Add, "add")
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Sub, "sub")
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Mul, "mul")
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryOp::Div, "div")
    }

    pub fn unary(self, op: UnaryOp) -> Result<Var<'t>> {
        let t = self.value().map(|x| unary_value(op, x));
        if self.tape.guard && domain_sensitive(op) && t.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "unary" });
        }
        self.check_nan("unary", &t)?;
        Ok(self.derive(t, Op::Unary { op, x: self.id }))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Relu)
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Gelu)
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Log)
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Exp)
    }

    pub fn neg(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Neg)
    }

    pub fn sqrt(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn xlogx(self) -> Result<Var<'t>> {
        self.unary(UnaryOp::XLogX)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>> {
        let t = self.value().map(|x| x * factor);
        Ok(self.derive(t, Op::Scale { x: self.id, factor }))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'t>> {
        let t = self.value().map(|x| x + c);
        Ok(self.derive(t, Op::AddScalar(self.id)))
    }

    fn check_axis(&self, op: &'static str, axis: usize) -> Result<Arc<Tensor>> {
        let v = self.value();
        if axis >= v.rank() {
            return Err(Error::Axis { op, axis, shape: v.shape().to_vec() });
        }
        Ok(v)
    }

    /// Max-subtracted softmax; `-inf` entries are treated as masked and map to exactly 0.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.check_axis("softmax", axis)?;
        let out = softmax_values(&x, axis, false)?;
        Ok(self.derive(out, Op::Softmax { x: self.id, axis }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t>> {
        let x = self.check_axis("log_softmax", axis)?;
        let out = softmax_values(&x, axis, true)?;
        Ok(self.derive(out, Op::LogSoftmax { x: self.id, axis }))
    }

    fn reduce(self, op: ReduceOp, axis: usize, name: &'static str) -> Result<Var<'t>> {
        let x = self.check_axis(name, axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..n {
                for k in 0..inner {
                    out[o * inner + k] += x.data()[(o * n + i) * inner + k];
                }
            }
        }
        if matches!(op, ReduceOp::Mean) {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = 1;
        Ok(self.derive(Tensor::new(shape, out)?, Op::Reduce { op, x: self.id, axis }))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Sum, axis, "sum")
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        self.reduce(ReduceOp::Mean, axis, "mean")
    }

    pub fn sum_all(self) -> Result<Var<'t>> {
        let total = self.value().data().iter().sum();
        Ok(self.derive(Tensor::scalar(total), Op::SumAll(self.id)))
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.check_axis("slice", axis)?;
        let (outer, n, inner) = axis_split(x.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::Axis { op: "slice", axis, shape: x.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[from..from + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.derive(Tensor::new(shape, out)?, Op::Slice { x: self.id, axis, start }))
    }

    /// Broadcasts extent-1 axes up to `shape`.
    pub fn expand(self, shape: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let ok = x.rank() == shape.len() && x.shape().iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(Error::Dimension { op: "expand", lhs: x.shape().to_vec(), rhs: shape.to_vec() });
        }
        let map = index_map(shape, x.shape());
        let n: usize = shape.iter().product();
        let out = (0..n).map(|i| x.data()[map.at(i)]).collect();
        Ok(self.derive(Tensor::new(shape.to_vec(), out)?, Op::Expand(self.id)))
    }

    /// `self · w + b` with `b` broadcast over rows; `b` may be `[n]` or `[1, n]`.
    pub fn affine(self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        require_matrix("affine", &x)?;
        require_matrix("affine", &wv)?;
        if x.cols() != wv.rows() {
            return Err(Error::Dimension { op: "affine", lhs: x.shape().to_vec(), rhs: wv.shape().to_vec() });
        }
        let (m, k, n) = (x.rows(), x.cols(), wv.cols());
        if bv.len() != n || bv.cols() != n {
            return Err(Error::Dimension { op: "affine", lhs: wv.shape().to_vec(), rhs: bv.shape().to_vec() });
        }
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(bv.data());
        }
        matmul_into(x.data(), wv.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        self.check_nan("affine", &t)?;
        Ok(self.derive(t, Op::Affine { x: self.id, w: w.id, b: b.id }))
    }

    pub fn gather_rows(self, rows: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("gather_rows", &x)?;
        if rows.is_empty() || rows.iter().any(|&r| r >= x.rows()) {
            return Err(Error::Axis { op: "gather_rows", axis: 0, shape: x.shape().to_vec() });
        }
        let c = x.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            out.extend_from_slice(x.row(r));
        }
        Ok(self.derive(Tensor::new(vec![rows.len(), c], out)?, Op::GatherRows { x: self.id, rows: rows.to_vec() }))
    }

    /// Output row `v` is the mean of the rows listed in `groups[v]`; empty groups yield zero rows.
    pub fn segment_mean(self, groups: &[Vec<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("segment_mean", &x)?;
        if groups.is_empty() || groups.iter().flatten().any(|&r| r >= x.rows()) {
            return Err(Error::Axis { op: "segment_mean", axis: 0, shape: x.shape().to_vec() });
        }
        let c = x.cols();
        let mut out = vec![0.0; groups.len() * c];
        for (v, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let w = 1.0 / group.len() as f64;
            let dst = &mut out[v * c..(v + 1) * c];
            for &src in group {
                for (d, s) in dst.iter_mut().zip(x.row(src)) {
                    *d += w * s;
                }
            }
        }
        Ok(self.derive(Tensor::new(vec![groups.len(), c], out)?, Op::SegmentMean { x: self.id, groups: groups.to_vec() }))
    }

    /// `self + weight ⊙ (end − self)` with `weight` broadcast (e.g. `L×1` against `L×d`).
    ///
    /// For weights in `[0, 1]` every output coordinate lies between the
    /// corresponding `self` and `end` coordinates; the final rounding is clamped
    /// into that interval.
    pub fn lerp(self, end: Var<'t>, weight: Var<'t>) -> Result<Var<'t>> {
        let (s, e, w) = (self.value(), end.value(), weight.value());
        if s.shape() != e.shape() {
            return Err(Error::Dimension { op: "lerp", lhs: s.shape().to_vec(), rhs: e.shape().to_vec() });
        }
        if broadcast_shape("lerp", s.shape(), w.shape())? != s.shape() {
            return Err(Error::Dimension { op: "lerp", lhs: s.shape().to_vec(), rhs: w.shape().to_vec() });
        }
        let map = index_map(s.shape(), w.shape());
        let out = (0..s.len())
            .map(|i| {
                let (a, b, t) = (s.data()[i], e.data()[i], w.data()[map.at(i)]);
                let z = a + t * (b - a);
                if (0.0..=1.0).contains(&t) {
                    z.clamp(a.min(b), a.max(b))
                } else {
                    z
                }
            })
            .collect();
        let t = Tensor::new(s.shape().to_vec(), out)?;
        self.check_nan("lerp", &t)?;
        Ok(self.derive(t, Op::Lerp { start: self.id, end: end.id, weight: weight.id }))
    }

    /// Picks `self[r, cols[r]]` for every row, giving an `L×1` column.
    pub fn pick_cols(self, cols: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        require_matrix("pick_cols", &x)?;
        if cols.len() != x.rows() || cols.iter().any(|&c| c >= x.cols()) {
            return Err(Error::Dimension { op: "pick_cols", lhs: x.shape().to_vec(), rhs: vec![cols.len()] });
        }
        let out = cols.iter().enumerate().map(|(r, &c)| x.at(r, c)).collect();
        Ok(self.derive(Tensor::new(vec![cols.len(), 1], out)?, Op::PickCols { x: self.id, cols: cols.to_vec() }))
    }
}

fn softmax_values(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    let op = if log { "log_softmax" } else { "softmax" };
    if x.data().iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(Error::NonFinite { op });
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];
    for o in 0..outer {
        for k in 0..inner {
            let at = |i: usize| (o * n + i) * inner + k;
            let max = (0..n).map(|i| xd[at(i)]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::DegenerateMask { op });
            }
            let total: f64 = (0..n).map(|i| (xd[at(i)] - max).exp()).sum();
            for i in 0..n {
                let shifted = xd[at(i)] - max;
                out[at(i)] = if log { shifted - total.ln() } else { shifted.exp() / total };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Plain-value softmax along the last axis of a vector, sharing the tape's masking rules.
pub(crate) fn softmax_slice(logits: &[f64]) -> Result<Vec<f64>> {
    let t = Tensor::vector(logits.to_vec());
    Ok(softmax_values(&t, 0, false)?.into_data())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{grad_check, GradCheckOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()).unwrap()
    }

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_fixtures() {
        let tape = Tape::new();
        let x = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let id = tape.constant(Tensor::identity(2));
        let out = id.matmul(tape.constant(x.clone())).unwrap();
        assert_eq!(*out.value(), x);

        let a = tape.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(m(&[&[1.0], &[1.0]]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = a.matmul(b).err().unwrap().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn sigmoid_values() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 1.0, -800.0, 800.0]));
        let y = x.sigmoid().unwrap().value();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(y.data()[2], 0.0);
        assert_eq!(y.data()[3], 1.0);
    }

    #[test]
    fn column_broadcast_scales_rows() {
        let tape = Tape::new();
        let alpha = tape.constant(m(&[&[2.0], &[0.5]]));
        let mat = tape.constant(m(&[&[1.0, 2.0, 3.0], &[4.0, 6.0, 8.0]]));
        let out = alpha.mul(mat).unwrap().value();
        assert_eq!(out.data(), &[2.0, 4.0, 6.0, 2.0, 3.0, 4.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(bad.mul(mat).is_err());
        let rank_mismatch = tape.constant(Tensor::zeros(&[3]));
        assert!(rank_mismatch.add(mat).is_err());
    }

    #[test]
    fn softmax_fixtures() {
        let tape = Tape::new();
        let eq = tape.constant(Tensor::vector(vec![4.2; 3])).softmax(0).unwrap().value();
        for v in eq.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = tape.constant(Tensor::vector(vec![2.0, 1.0, 0.0])).softmax(0).unwrap().value();
        let expected = [0.665_240_955_774_821_9, 0.244_728_471_054_797_6, 0.090_030_573_170_380_46];
        for (a, b) in p.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let masked = tape.constant(Tensor::vector(vec![2.0, 1.0, f64::NEG_INFINITY])).softmax(0).unwrap().value();
        assert!((masked.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((masked.data()[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        assert_eq!(masked.data()[2], 0.0);
    }

    #[test]
    fn fully_masked_softmax_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![f64::NEG_INFINITY; 2]));
        assert!(matches!(x.softmax(0), Err(Error::DegenerateMask { .. })));
    }

    #[test]
    fn reduce_concat_affine_fixtures() {
        let tape = Tape::new();
        let x = tape.constant(m(&[&[1.0, 3.0], &[3.0, 5.0]]));
        assert_eq!(x.mean(0).unwrap().value().data(), &[2.0, 4.0]);
        assert_eq!(x.sum(1).unwrap().value().shape(), &[2, 1]);
        assert!(x.mean(2).is_err());

        let a = tape.constant(Tensor::zeros(&[3, 2]));
        let b = tape.constant(Tensor::zeros(&[3, 5]));
        assert_eq!(tape.concat(&[a, b], 1).unwrap().shape(), vec![3, 7]);
        assert!(tape.concat(&[a, b], 0).is_err());

        let w = tape.constant(Tensor::zeros(&[2, 3]));
        let bias = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let y = x.affine(w, bias).unwrap().value();
        assert_eq!(y.data(), &[1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
    }

    #[test]
    fn guard_flags_log_of_negative() {
        let tape = Tape::with_guard(true);
        let x = tape.constant(Tensor::vector(vec![-1.0]));
        assert!(matches!(x.log(), Err(Error::NonFinite { .. })));
        let open = Tape::new();
        assert!(open.constant(Tensor::vector(vec![-1.0])).log().is_ok());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[[0.3, -2.0], [5.0, 1.0]]).unwrap());
        let s = x.sum_all().unwrap();
        let g = tape.backward(s).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[1.0; 4]);
    }

    #[test]
    fn two_paths_accumulate() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.5, -0.5]));
        let y = x.mul(x).unwrap().add(x.scale(3.0).unwrap()).unwrap().sum_all().unwrap();
        let g = tape.backward(y).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[2.0 * 1.5 + 3.0, 2.0 * -0.5 + 3.0]);
    }

    #[test]
    fn constants_have_no_gradient() {
        let tape = Tape::new();
        let c = tape.constant(Tensor::vector(vec![1.0]));
        let x = tape.leaf(Tensor::vector(vec![2.0]));
        let y = c.mul(x).unwrap().sum_all().unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn index_map_broadcasts_leading_axis() {
        let IndexMap::Table(t) = index_map(&[2, 3], &[1, 3]) else { panic!() };
        assert_eq!(t, vec![0, 1, 2, 0, 1, 2]);
        let IndexMap::Table(t) = index_map(&[2, 3], &[2, 1]) else { panic!() };
        assert_eq!(t, vec![0, 0, 0, 1, 1, 1]);
    }

    /// Every primitive against central differences on random shapes up to 8×8.
    #[test]
    fn primitives_match_finite_differences() {
        let opts = GradCheckOptions::primitive();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..6 {
            let (r, k, c) = (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8));
            let a = random(&mut rng, &[r, k]);
            let b = random(&mut rng, &[k, c]);
            let same = random(&mut rng, &[r, k]);
            let col = random(&mut rng, &[r, 1]);
            let bias = random(&mut rng, &[1, c]);
            let positive = random(&mut rng, &[r, k]).map(|v| v.abs() + 0.2);
            let weights = random(&mut rng, &[r, c]);
            let wk = random(&mut rng, &[r, k]);

            let checks: Vec<(&str, Vec<Tensor>, Box<dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>>)> = vec![
                ("matmul", vec![a.clone(), b.clone(), weights.clone()], Box::new(|_, v| v[0].matmul(v[1])?.mul(v[2])?.sum_all())),
                ("affine", vec![a.clone(), b.clone(), bias.clone()], Box::new(|_, v| v[0].affine(v[1], v[2])?.tanh()?.sum_all())),
                ("add-broadcast", vec![same.clone(), col.clone(), wk.clone()], Box::new(|_, v| v[0].add(v[1])?.mul(v[2])?.sum_all())),
                ("sub", vec![same.clone(), a.clone(), wk.clone()], Box::new(|_, v| v[0].sub(v[1])?.mul(v[2])?.sum_all())),
                ("mul-broadcast", vec![col.clone(), same.clone()], Box::new(|_, v| v[0].mul(v[1])?.tanh()?.sum_all())),
                ("div", vec![same.clone(), positive.clone()], Box::new(|_, v| v[0].div(v[1])?.sum_all())),
                ("sigmoid", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].sigmoid()?.mul(v[1])?.sum_all())),
                ("tanh", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].tanh()?.mul(v[1])?.sum_all())),
                ("gelu", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].gelu()?.mul(v[1])?.sum_all())),
                ("relu", vec![same.map(|x| if x.abs() < 0.05 { 0.3 } else { x })], Box::new(|_, v| v[0].relu()?.mul(v[0])?.sum_all())),
                ("log", vec![positive.clone()], Box::new(|_, v| v[0].log()?.sum_all())),
                ("exp", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].exp()?.mul(v[1])?.sum_all())),
                ("neg", vec![same.clone()], Box::new(|_, v| v[0].neg()?.mul(v[0])?.sum_all())),
                ("sqrt", vec![positive.clone()], Box::new(|_, v| v[0].sqrt()?.sum_all())),
                ("xlogx", vec![positive.clone()], Box::new(|_, v| v[0].xlogx()?.sum_all())),
                ("softmax0", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].softmax(0)?.mul(v[1])?.sum_all())),
                ("softmax1", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].softmax(1)?.mul(v[1])?.sum_all())),
                ("log_softmax", vec![same.clone(), wk.clone()], Box::new(|_, v| v[0].log_softmax(1)?.mul(v[1])?.sum_all())),
                ("mean", vec![same.clone()], Box::new(|_, v| v[0].mean(0)?.tanh()?.sum_all())),
                ("sum", vec![same.clone()], Box::new(|_, v| v[0].sum(1)?.tanh()?.sum_all())),
                ("transpose", vec![a.clone(), a.clone()], Box::new(|_, v| v[0].transpose()?.matmul(v[1])?.sum_all())),
                ("concat", vec![a.clone(), same.clone()], Box::new(|t, v| t.concat(&[v[0], v[1]], 0)?.tanh()?.sum_all())),
                ("slice", vec![a.clone()], Box::new(|_, v| { let c = v[0].shape()[1]; v[0].slice(1, c / 2, c - c / 2)?.tanh()?.sum_all() })),
                ("expand", vec![bias.clone()], Box::new(|_, v| v[0].expand(&[3, v[0].shape()[1]])?.tanh()?.sum_all())),
                ("gather", vec![a.clone()], Box::new(|_, v| v[0].gather_rows(&[0, 0, v[0].shape()[0] - 1])?.tanh()?.sum_all())),
                ("segment_mean", vec![a.clone()], Box::new(|_, v| { let n = v[0].shape()[0]; v[0].segment_mean(&[vec![0, n - 1], vec![], (0..n).collect()])?.tanh()?.sum_all() })),
                ("pick", vec![a.clone()], Box::new(|_, v| { let s = v[0].shape(); let cols: Vec<usize> = (0..s[0]).map(|i| i % s[1]).collect(); v[0].pick_cols(&cols)?.tanh()?.sum_all() })),
                ("lerp", vec![same.clone(), wk.clone(), col.map(|x| 0.5 + 0.3 * x.tanh())], Box::new(|_, v| v[0].lerp(v[1], v[2])?.tanh()?.sum_all())),
                ("scale+shift", vec![a.clone()], Box::new(|_, v| v[0].scale(-1.7)?.add_scalar(0.3)?.tanh()?.sum_all())),
            ];
            for (name, inputs, f) in checks {
                let report = grad_check(|t, v| f(t, v), &inputs, &opts).unwrap();
                assert!(report.passed, "{name}: {report:?}");
            }
        }
    }

    #[test]
    fn repeated_computation_is_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tape = Tape::new();
            let x = tape.leaf(random(&mut rng, &[4, 5]));
            let w = tape.leaf(random(&mut rng, &[5, 3]));
            let y = x.matmul(w).unwrap().softmax(1).unwrap().log().unwrap().sum_all().unwrap();
            let g = tape.backward(y).unwrap();
            (y.value().item().to_bits(), g.get(x).unwrap(), g.get(w).unwrap())
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
        assert_eq!(a.2, b.2);
    }
}
