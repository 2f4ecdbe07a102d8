//! Reverse-mode automatic differentiation over a dynamically recorded graph.
//!
//! A [`Tape`] owns every intermediate value of one forward computation. Each
//! operation on a [`Tensor`] handle appends a node; [`Tape::backward`] then
//! walks the nodes in reverse creation order and accumulates adjoints into every
//! tracked node that contributes to the root.
//!
//! Tensors are row-major. Row-wise operations (`linear`, `gather_rows`,
//! `segment_sum`, `mul_rows`, `normalize_rows`) view a tensor as a matrix whose
//! width is its last dimension and whose height is the product of the rest.
//!
//! Nodes that do not depend on any tracked leaf are stored without their
//! operation record, so constant sub-graphs cost no backward work.

use std::cell::RefCell;
use std::fmt;

use super::kernels::{gemm, View};
use super::matrix::Matrix;
use crate::error::{dim_err, Error, Result};

/// Probability floor used by [`Tensor::nll`].
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    Recip { a: usize },
    Elu { a: usize },
    Sum { a: usize },
    Reshape { a: usize },
    Concat { parts: Vec<usize>, outer: usize, widths: Vec<usize> },
    GatherRows { a: usize, indices: Vec<usize> },
    SegmentSum { a: usize, groups: usize },
    MulRows { x: usize, w: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    NormalizeRows { a: usize, norms: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, blocks: usize, heads: usize, probs: Vec<f64> },
    Nll { p: usize, labels: Vec<usize>, clamped: Vec<bool> },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Scale { a, .. }
            | Op::AddScalar { a }
            | Op::Recip { a }
            | Op::Elu { a }
            | Op::Sum { a }
            | Op::Reshape { a }
            | Op::GatherRows { a, .. }
            | Op::SegmentSum { a, .. }
            | Op::Softmax { a, .. }
            | Op::NormalizeRows { a, .. } => vec![*a],
            Op::Concat { parts, .. } => parts.clone(),
            Op::MulRows { x, w } => vec![*x, *w],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Nll { p, .. } => vec![*p],
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    tracked: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.len()).finish()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Tensor<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// (rows, width) of the row view of a shape.
fn row_view(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&w, rest)) => (numel(rest), w),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Untracked input (data, features, constants).
    pub fn constant(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor<'_>> {
        self.leaf(shape, values, false)
    }

    /// Tracked input whose adjoint is accumulated by [`Tape::backward`].
    pub fn param(&self, shape: &[usize], values: Vec<f64>) -> Result<Tensor<'_>> {
        self.leaf(shape, values, true)
    }

    pub fn constant_matrix(&self, m: &Matrix) -> Result<Tensor<'_>> {
        self.constant(&[m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn param_matrix(&self, m: &Matrix) -> Result<Tensor<'_>> {
        self.param(&[m.rows(), m.cols()], m.as_slice().to_vec())
    }

    pub fn scalar(&self, v: f64) -> Result<Tensor<'_>> {
        self.constant(&[1], vec![v])
    }

    fn leaf(&self, shape: &[usize], values: Vec<f64>, tracked: bool) -> Result<Tensor<'_>> {
        if numel(shape) != values.len() {
            return dim_err(
                "leaf",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), values.len()),
            );
        }
        if shape.contains(&0) && !values.is_empty() {
            return dim_err("leaf", "zero-sized dimension with values");
        }
        self.push(shape.to_vec(), values, Op::Leaf, tracked, "leaf")
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        leaf_tracked: bool,
        name: &'static str,
    ) -> Result<Tensor<'_>> {
        debug_assert_eq!(numel(&shape), value.len());
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let tracked = match op {
            Op::Leaf => leaf_tracked,
            ref op => op.inputs().iter().any(|&i| nodes[i].tracked),
        };
        let op = if tracked { op } else { Op::Leaf };
        nodes.push(Node {
            shape,
            value,
            op,
            tracked,
        });
        Ok(Tensor {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn check_owner(&self, t: &Tensor<'_>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self, t.tape) {
            Ok(())
        } else {
            dim_err(op, "tensor belongs to another tape")
        }
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    /// Zero-sized parts are allowed and contribute nothing.
    pub fn concat<'t>(&'t self, parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
        if parts.is_empty() {
            return Err(Error::EmptySet { what: "concat" });
        }
        for p in parts {
            self.check_owner(p, "concat")?;
        }
        let nodes = self.nodes.borrow();
        let shapes: Vec<&[usize]> = parts.iter().map(|p| nodes[p.id].shape.as_slice()).collect();
        let rank = shapes[0].len();
        if axis >= rank {
            return dim_err("concat", format!("axis {axis} out of range for rank {rank}"));
        }
        for s in &shapes {
            if s.len() != rank
                || s[..axis] != shapes[0][..axis]
                || s[axis + 1..] != shapes[0][axis + 1..]
            {
                return dim_err("concat", format!("incompatible shapes {:?} and {:?}", shapes[0], s));
            }
        }
        let outer = numel(&shapes[0][..axis]);
        let inner = numel(&shapes[0][axis + 1..]);
        let widths: Vec<usize> = shapes.iter().map(|s| s[axis] * inner).collect();
        let total: usize = widths.iter().sum();
        let mut value = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                value.extend_from_slice(&nodes[p.id].value[o * w..(o + 1) * w]);
            }
        }
        let mut shape = shapes[0].to_vec();
        shape[axis] = shapes.iter().map(|s| s[axis]).sum();
        drop(nodes);
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(shape, value, Op::Concat { parts: ids, outer, widths }, false, "concat")
    }

    /// Reverse pass from a single-element `root`.
    pub fn backward(&self, root: Tensor<'_>) -> Result<Gradients> {
        self.check_owner(&root, "backward")?;
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return dim_err("backward", "root must hold exactly one value");
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[root.id].tracked {
            adj[root.id] = Some(vec![1.0]);
        }
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut adj);
            adj[id] = Some(g);
        }
        if !adj.iter().flatten().flatten().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { adjoints: adj })
    }
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Adjoint of `t`, or `None` when `t` is untracked or does not reach the root.
    pub fn get(&self, t: Tensor<'_>) -> Option<&[f64]> {
        self.adjoints.get(t.id).and_then(|a| a.as_deref())
    }

    /// Adjoint of `t`, zero-filled when absent.
    pub fn wrt(&self, t: Tensor<'_>) -> Vec<f64> {
        match self.get(t) {
            Some(a) => a.to_vec(),
            None => vec![0.0; t.numel()],
        }
    }
}

fn accumulate<'a>(
    nodes: &[Node],
    adj: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].tracked {
        return None;
    }
    let n = nodes[id].value.len();
    Some(adj[id].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], id: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match &node.op {
        Op::Leaf => {}
        &Op::Binary { kind, a, b } => {
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let a_scalar = av.len() == 1 && g.len() != 1;
            let b_scalar = bv.len() == 1 && g.len() != 1;
            let aval = |i: usize| if a_scalar { av[0] } else { av[i] };
            let bval = |i: usize| if b_scalar { bv[0] } else { bv[i] };
            // Local partials for each operand at output position i.
            let da = |i: usize| match kind {
                BinaryKind::Add | BinaryKind::Sub => 1.0,
                BinaryKind::Mul => bval(i),
                BinaryKind::Div => 1.0 / bval(i),
            };
            let db = |i: usize| match kind {
                BinaryKind::Add => 1.0,
                BinaryKind::Sub => -1.0,
                BinaryKind::Mul => aval(i),
                BinaryKind::Div => -aval(i) / (bval(i) * bval(i)),
            };
            if let Some(ga) = accumulate(nodes, adj, a) {
                if a_scalar {
                    ga[0] += g.iter().enumerate().map(|(i, gi)| gi * da(i)).sum::<f64>();
                } else {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * da(i);
                    }
                }
            }
            if let Some(gb) = accumulate(nodes, adj, b) {
                if b_scalar {
                    gb[0] += g.iter().enumerate().map(|(i, gi)| gi * db(i)).sum::<f64>();
                } else {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i] += gi * db(i);
                    }
                }
            }
        }
        &Op::Scale { a, factor } => {
            if let Some(ga) = accumulate(nodes, adj, a) {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi * factor;
                }
            }
        }
        &Op::AddScalar { a } | &Op::Reshape { a } => {
            if let Some(ga) = accumulate(nodes, adj, a) {
                for (x, gi) in ga.iter_mut().zip(g) {
                    *x += gi;
                }
            }
        }
        &Op::Recip { a } => {
            let y = &node.value;
            if let Some(ga) = accumulate(nodes, adj, a) {
                for i in 0..g.len() {
                    ga[i] -= g[i] * y[i] * y[i];
                }
            }
        }
        &Op::Elu { a } => {
            let x = &nodes[a].value;
            let y = &node.value;
            if let Some(ga) = accumulate(nodes, adj, a) {
                for i in 0..g.len() {
                    ga[i] += if x[i] >= 0.0 { g[i] } else { g[i] * (y[i] + 1.0) };
                }
            }
        }
        &Op::Sum { a } => {
            if let Some(ga) = accumulate(nodes, adj, a) {
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
        }
        Op::Concat { parts, outer, widths } => {
            let total: usize = widths.iter().sum();
            let mut offset = 0;
            for (&p, &w) in parts.iter().zip(widths) {
                if let Some(gp) = accumulate(nodes, adj, p) {
                    for o in 0..*outer {
                        let src = &g[o * total + offset..o * total + offset + w];
                        for (x, s) in gp[o * w..(o + 1) * w].iter_mut().zip(src) {
                            *x += s;
                        }
                    }
                }
                offset += w;
            }
        }
        Op::GatherRows { a, indices } => {
            let (_, width) = row_view(&nodes[*a].shape);
            if let Some(ga) = accumulate(nodes, adj, *a) {
                for (r, &src) in indices.iter().enumerate() {
                    for c in 0..width {
                        ga[src * width + c] += g[r * width + c];
                    }
                }
            }
        }
        &Op::SegmentSum { a, groups } => {
            let (rows, width) = row_view(&nodes[a].shape);
            let per = rows / groups;
            if let Some(ga) = accumulate(nodes, adj, a) {
                for r in 0..rows {
                    let s = r / per;
                    for c in 0..width {
                        ga[r * width + c] += g[s * width + c];
                    }
                }
            }
        }
        &Op::MulRows { x, w } => {
            let (rows, width) = row_view(&nodes[x].shape);
            let xv = &nodes[x].value;
            let wv = &nodes[w].value;
            if let Some(gx) = accumulate(nodes, adj, x) {
                for r in 0..rows {
                    for c in 0..width {
                        gx[r * width + c] += g[r * width + c] * wv[r];
                    }
                }
            }
            if let Some(gw) = accumulate(nodes, adj, w) {
                for r in 0..rows {
                    let row = r * width..(r + 1) * width;
                    gw[r] += g[row.clone()].iter().zip(&xv[row]).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        &Op::Linear { x, w, b } => {
            let (rows, fan_in) = row_view(&nodes[x].shape);
            let fan_out = nodes[w].shape[0];
            if let Some(gx) = accumulate(nodes, adj, x) {
                gemm(
                    rows,
                    fan_out,
                    fan_in,
                    1.0,
                    View::row_major(g, fan_out),
                    View::row_major(&nodes[w].value, fan_in),
                    1.0,
                    gx,
                    fan_in,
                );
            }
            if let Some(gw) = accumulate(nodes, adj, w) {
                gemm(
                    fan_out,
                    rows,
                    fan_in,
                    1.0,
                    View::transposed(g, fan_out),
                    View::row_major(&nodes[x].value, fan_in),
                    1.0,
                    gw,
                    fan_in,
                );
            }
            if let Some(b) = b {
                if let Some(gb) = accumulate(nodes, adj, b) {
                    for r in 0..rows {
                        for (o, x) in gb.iter_mut().enumerate() {
                            *x += g[r * fan_out + o];
                        }
                    }
                }
            }
        }
        &Op::Softmax { a, outer, len, inner } => {
            let y = &node.value;
            if let Some(ga) = accumulate(nodes, adj, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * len * inner + j * inner + i;
                        let dotp: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            ga[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                        }
                    }
                }
            }
        }
        Op::NormalizeRows { a, norms } => {
            let (rows, width) = row_view(&nodes[*a].shape);
            let y = &node.value;
            if let Some(ga) = accumulate(nodes, adj, *a) {
                for r in 0..rows {
                    let row = r * width..(r + 1) * width;
                    let gy: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(p, q)| p * q).sum();
                    for c in row {
                        ga[c] += (g[c] - y[c] * gy) / norms[r];
                    }
                }
            }
        }
        Op::Attention { q, k, v, blocks, heads, probs } => {
            attention_backward(nodes, adj, g, (*q, *k, *v), *blocks, *heads, probs);
        }
        Op::Nll { p, labels, clamped } => {
            let (_, width) = row_view(&nodes[*p].shape);
            let pv = &nodes[*p].value;
            let n = labels.len() as f64;
            if let Some(gp) = accumulate(nodes, adj, *p) {
                for (i, (&y, &c)) in labels.iter().zip(clamped).enumerate() {
                    if !c {
                        let at = i * width + y;
                        gp[at] -= g[0] / (n * pv[at]);
                    }
                }
            }
        }
    }
}

/// Shape bookkeeping for the blocked multi-head attention kernel.
struct AttnDims {
    n: usize,
    qdim: usize,
    head_dim: usize,
    scale: f64,
}

impl AttnDims {
    fn new(rows: usize, qdim: usize, blocks: usize, heads: usize) -> Self {
        let head_dim = qdim / heads;
        Self {
            n: rows / blocks,
            qdim,
            head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }

    /// Offset of the first element of (block, head) in a `rows x qdim` buffer.
    fn offset(&self, block: usize, head: usize) -> usize {
        block * self.n * self.qdim + head * self.head_dim
    }
}

fn attention_forward(
    qv: &[f64],
    kv: &[f64],
    vv: &[f64],
    rows: usize,
    qdim: usize,
    blocks: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let d = AttnDims::new(rows, qdim, blocks, heads);
    let n = d.n;
    let mut out = vec![0.0; rows * qdim];
    let mut probs = vec![0.0; blocks * heads * n * n];
    for b in 0..blocks {
        for h in 0..heads {
            let off = d.offset(b, h);
            let p = &mut probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            gemm(
                n,
                d.head_dim,
                n,
                d.scale,
                View { data: &qv[off..], rs: qdim, cs: 1 },
                View { data: &kv[off..], rs: 1, cs: qdim },
                0.0,
                p,
                n,
            );
            for row in p.chunks_exact_mut(n) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            gemm(
                n,
                n,
                d.head_dim,
                1.0,
                View::row_major(p, n),
                View { data: &vv[off..], rs: qdim, cs: 1 },
                0.0,
                &mut out[off..],
                qdim,
            );
        }
    }
    (out, probs)
}

fn attention_backward(
    nodes: &[Node],
    adj: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (usize, usize, usize),
    blocks: usize,
    heads: usize,
    probs: &[f64],
) {
    let (rows, qdim) = row_view(&nodes[q].shape);
    let d = AttnDims::new(rows, qdim, blocks, heads);
    let n = d.n;
    let (qv, kv, vv) = (&nodes[q].value, &nodes[k].value, &nodes[v].value);
    let mut dq = vec![0.0; rows * qdim];
    let mut dk = vec![0.0; rows * qdim];
    let mut dv = vec![0.0; rows * qdim];
    let mut dp = vec![0.0; n * n];
    for b in 0..blocks {
        for h in 0..heads {
            let off = d.offset(b, h);
            let p = &probs[(b * heads + h) * n * n..(b * heads + h + 1) * n * n];
            // dP = dO V^T
            gemm(
                n,
                d.head_dim,
                n,
                1.0,
                View { data: &g[off..], rs: qdim, cs: 1 },
                View { data: &vv[off..], rs: 1, cs: qdim },
                0.0,
                &mut dp,
                n,
            );
            // dV = P^T dO
            gemm(
                n,
                n,
                d.head_dim,
                1.0,
                View::transposed(p, n),
                View { data: &g[off..], rs: qdim, cs: 1 },
                1.0,
                &mut dv[off..],
                qdim,
            );
            // dS = P * (dP - rowsum(dP * P)), reusing dp.
            for (drow, prow) in dp.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let s: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                for (x, pj) in drow.iter_mut().zip(prow) {
                    *x = pj * (*x - s);
                }
            }
            // dQ = scale * dS K ; dK = scale * dS^T Q
            gemm(
                n,
                n,
                d.head_dim,
                d.scale,
                View::row_major(&dp, n),
                View { data: &kv[off..], rs: qdim, cs: 1 },
                1.0,
                &mut dq[off..],
                qdim,
            );
            gemm(
                n,
                n,
                d.head_dim,
                d.scale,
                View::transposed(&dp, n),
                View { data: &qv[off..], rs: qdim, cs: 1 },
                1.0,
                &mut dk[off..],
                qdim,
            );
        }
    }
    for (id, local) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(acc) = accumulate(nodes, adj, id) {
            for (x, l) in acc.iter_mut().zip(local) {
                *x += l;
            }
        }
    }
}

impl<'t> Tensor<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    /// Copy of the values.
    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Reads the values without copying.
    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// The value as a matrix under the row view.
    pub fn to_matrix(&self) -> Matrix {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        let (rows, width) = row_view(&node.shape);
        Matrix::new(rows, width, node.value.clone()).expect("row view matches numel")
    }

    /// Single-element value.
    pub fn item(&self) -> f64 {
        self.with_value(|v| v[0])
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Tensor<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.iter().map(|&x| f(x)).collect())
        };
        self.tape.push(shape, value, op, false, name)
    }

    fn binary(&self, other: Tensor<'t>, kind: BinaryKind, name: &'static str) -> Result<Tensor<'t>> {
        self.tape.check_owner(&other, name)?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            if a.shape == b.shape {
                (a.shape.clone(), a.value.iter().zip(&b.value).map(|(&x, &y)| f(x, y)).collect())
            } else if b.value.len() == 1 {
                let y = b.value[0];
                (a.shape.clone(), a.value.iter().map(|&x| f(x, y)).collect())
            } else if a.value.len() == 1 {
                let x = a.value[0];
                (b.shape.clone(), b.value.iter().map(|&y| f(x, y)).collect())
            } else {
                return dim_err(name, format!("shapes {:?} and {:?}", a.shape, b.shape));
            }
        };
        self.tape.push(shape, value, Op::Binary { kind, a: self.id, b: other.id }, false, name)
    }

    pub fn add(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, BinaryKind::Sub, "sub")
    }

    /// Elementwise product.
    pub fn mul(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, BinaryKind::Mul, "mul")
    }

    pub fn div(&self, other: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(other, BinaryKind::Div, "div")
    }

    pub fn square(&self) -> Result<Tensor<'t>> {
        self.mul(*self)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor<'t>> {
        self.unary("scale", |x| x * factor, Op::Scale { a: self.id, factor })
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor<'t>> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar { a: self.id })
    }

    pub fn recip(&self) -> Result<Tensor<'t>> {
        self.unary("recip", |x| 1.0 / x, Op::Recip { a: self.id })
    }

    /// ELU with alpha = 1.
    pub fn elu(&self) -> Result<Tensor<'t>> {
        self.unary("elu", elu, Op::Elu { a: self.id })
    }

    pub fn sum(&self) -> Result<Tensor<'t>> {
        let s = self.with_value(|v| v.iter().sum::<f64>());
        self.tape.push(vec![1], vec![s], Op::Sum { a: self.id }, false, "sum")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'t>> {
        let value = self.value();
        if numel(shape) != value.len() {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape()));
        }
        self.tape.push(shape.to_vec(), value, Op::Reshape { a: self.id }, false, "reshape")
    }

    /// Selects rows of the row view (rows may repeat). Output keeps the width.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let (rows, width) = row_view(&node.shape);
            if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
                return dim_err("gather_rows", format!("row {bad} out of {rows}"));
            }
            let mut value = Vec::with_capacity(indices.len() * width);
            for &i in indices {
                value.extend_from_slice(&node.value[i * width..(i + 1) * width]);
            }
            value
        };
        let width = row_view(&self.shape()).1;
        self.tape.push(
            vec![indices.len(), width],
            value,
            Op::GatherRows { a: self.id, indices: indices.to_vec() },
            false,
            "gather_rows",
        )
    }

    /// Sums consecutive equal-size groups of rows: `[groups * n, w] -> [groups, w]`.
    pub fn segment_sum(&self, groups: usize) -> Result<Tensor<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let (rows, width) = row_view(&node.shape);
            if groups == 0 || rows % groups != 0 {
                return dim_err("segment_sum", format!("{rows} rows into {groups} groups"));
            }
            let per = rows / groups;
            let mut value = vec![0.0; groups * width];
            for r in 0..rows {
                let s = r / per;
                for c in 0..width {
                    value[s * width + c] += node.value[r * width + c];
                }
            }
            value
        };
        let width = row_view(&self.shape()).1;
        self.tape.push(
            vec![groups, width],
            value,
            Op::SegmentSum { a: self.id, groups },
            false,
            "segment_sum",
        )
    }

    /// Scales row `r` of the row view by `w[r]`; `w` must hold one value per row.
    pub fn mul_rows(&self, w: Tensor<'t>) -> Result<Tensor<'t>> {
        self.tape.check_owner(&w, "mul_rows")?;
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (x, wn) = (&nodes[self.id], &nodes[w.id]);
            let (rows, width) = row_view(&x.shape);
            if wn.value.len() != rows {
                return dim_err("mul_rows", format!("{rows} rows but {} weights", wn.value.len()));
            }
            let mut value = x.value.clone();
            for r in 0..rows {
                for c in &mut value[r * width..(r + 1) * width] {
                    *c *= wn.value[r];
                }
            }
            (x.shape.clone(), value)
        };
        self.tape.push(shape, value, Op::MulRows { x: self.id, w: w.id }, false, "mul_rows")
    }

    /// `x W^T + b` over the row view of `x`, with `W` of shape `[out, in]`.
    pub fn linear(&self, weight: Tensor<'t>, bias: Option<Tensor<'t>>) -> Result<Tensor<'t>> {
        self.tape.check_owner(&weight, "linear")?;
        if let Some(b) = &bias {
            self.tape.check_owner(b, "linear")?;
        }
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let w = &nodes[weight.id];
            let (rows, fan_in) = row_view(&x.shape);
            if w.shape.len() != 2 || w.shape[1] != fan_in {
                return dim_err("linear", format!("input width {fan_in} vs weight {:?}", w.shape));
            }
            let fan_out = w.shape[0];
            let mut value = vec![0.0; rows * fan_out];
            gemm(
                rows,
                fan_in,
                fan_out,
                1.0,
                View::row_major(&x.value, fan_in),
                View::transposed(&w.value, fan_in),
                0.0,
                &mut value,
                fan_out,
            );
            if let Some(b) = &bias {
                let bv = &nodes[b.id].value;
                if bv.len() != fan_out {
                    return dim_err("linear", format!("bias length {} vs {fan_out}", bv.len()));
                }
                for row in value.chunks_exact_mut(fan_out) {
                    for (y, b) in row.iter_mut().zip(bv) {
                        *y += b;
                    }
                }
            }
            let mut shape = x.shape.clone();
            if shape.is_empty() {
                shape.push(fan_out);
            } else {
                *shape.last_mut().unwrap() = fan_out;
            }
            (shape, value)
        };
        let op = Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) };
        self.tape.push(shape, value, op, false, "linear")
    }

    /// Softmax along `axis`, stabilised by subtracting the per-slice maximum.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<'t>> {
        let (shape, value, outer, len, inner) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if axis >= x.shape.len() {
                return dim_err("softmax", format!("axis {axis} for shape {:?}", x.shape));
            }
            let outer = numel(&x.shape[..axis]);
            let len = x.shape[axis];
            let inner = numel(&x.shape[axis + 1..]);
            let mut value = x.value.clone();
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| o * len * inner + j * inner + i;
                    let max = (0..len).map(|j| x.value[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for j in 0..len {
                        let e = (x.value[at(j)] - max).exp();
                        value[at(j)] = e;
                        z += e;
                    }
                    for j in 0..len {
                        value[at(j)] /= z;
                    }
                }
            }
            (x.shape.clone(), value, outer, len, inner)
        };
        let op = Op::Softmax { a: self.id, outer, len, inner };
        self.tape.push(shape, value, op, false, "softmax")
    }

    /// Divides every row of the row view by its Euclidean norm.
    pub fn normalize_rows(&self) -> Result<Tensor<'t>> {
        let (shape, value, norms) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (rows, width) = row_view(&x.shape);
            let mut value = x.value.clone();
            let mut norms = Vec::with_capacity(rows);
            for r in 0..rows {
                let row = &mut value[r * width..(r + 1) * width];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n == 0.0 {
                    return Err(Error::DegenerateVector { what: "normalize_rows" });
                }
                for v in row.iter_mut() {
                    *v /= n;
                }
                norms.push(n);
            }
            (x.shape.clone(), value, norms)
        };
        self.tape.push(shape, value, Op::NormalizeRows { a: self.id, norms }, false, "normalize_rows")
    }

    /// Scaled dot-product attention computed independently within each of
    /// `blocks` equal groups of rows and each of `heads` equal column slices.
    /// `self` holds the queries; all three operands are `[rows, heads * head_dim]`.
    pub fn block_attention(
        &self,
        keys: Tensor<'t>,
        values: Tensor<'t>,
        blocks: usize,
        heads: usize,
    ) -> Result<Tensor<'t>> {
        self.tape.check_owner(&keys, "block_attention")?;
        self.tape.check_owner(&values, "block_attention")?;
        let (shape, out, probs) = {
            let nodes = self.tape.nodes.borrow();
            let (q, k, v) = (&nodes[self.id], &nodes[keys.id], &nodes[values.id]);
            if q.shape != k.shape || q.shape != v.shape {
                return dim_err("block_attention", format!("{:?} {:?} {:?}", q.shape, k.shape, v.shape));
            }
            let (rows, qdim) = row_view(&q.shape);
            if rows == 0 || blocks == 0 {
                return Err(Error::EmptySet { what: "block_attention" });
            }
            if rows % blocks != 0 || heads == 0 || qdim % heads != 0 {
                return dim_err(
                    "block_attention",
                    format!("{rows} rows / {blocks} blocks, width {qdim} / {heads} heads"),
                );
            }
            let (out, probs) = attention_forward(&q.value, &k.value, &v.value, rows, qdim, blocks, heads);
            (q.shape.clone(), out, probs)
        };
        let op = Op::Attention { q: self.id, k: keys.id, v: values.id, blocks, heads, probs };
        self.tape.push(shape, out, op, false, "block_attention")
    }

    /// Mean negative log-probability of the labelled entries of a probability
    /// matrix. Probabilities below [`PROB_FLOOR`] are clamped and contribute no
    /// gradient; the number of clamped rows is returned alongside the loss.
    pub fn nll(&self, labels: &[usize]) -> Result<(Tensor<'t>, usize)> {
        let (loss, clamped) = {
            let nodes = self.tape.nodes.borrow();
            let p = &nodes[self.id];
            let (rows, width) = row_view(&p.shape);
            if rows != labels.len() {
                return dim_err("nll", format!("{rows} rows but {} labels", labels.len()));
            }
            if labels.is_empty() {
                return Err(Error::EmptySet { what: "nll" });
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= width) {
                return dim_err("nll", format!("label {bad} with {width} classes"));
            }
            let mut clamped = Vec::with_capacity(rows);
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                let q = p.value[i * width + y];
                clamped.push(q < PROB_FLOOR);
                total -= q.max(PROB_FLOOR).ln();
            }
            (total / rows as f64, clamped)
        };
        let count = clamped.iter().filter(|&&c| c).count();
        let op = Op::Nll { p: self.id, labels: labels.to_vec(), clamped };
        Ok((self.tape.push(vec![1], vec![loss], op, false, "nll")?, count))
    }
}

pub fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
    }
}
