//! Dense f64 tensors on a reverse-mode gradient tape.
//!
//! A [`Tape`] owns every tensor created during one forward pass as an arena
//! of nodes; [`Var`] is an index into that arena. Operations push a node
//! recording their operands, and [`Tape::backward`] replays the records in
//! reverse to accumulate gradients into every tensor built with
//! `requires_grad`. A tape is confined to one worker and is either dropped
//! or rewound between training steps.
//!
//! Shape rules are deliberately strict: elementwise binaries require equal
//! shapes, or a right-hand side that matches the left-hand side minus its
//! leading batch axis (bias-style broadcast). Matmul is 2-D only. Everything
//! else is a shape error naming both shapes.

use crate::error::{Error, Result};

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Watermark used to rewind a tape to an earlier length.
#[derive(Debug, Clone, Copy)]
pub struct TapeMark(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Matmul(Var, Var),
    Relu(Var),
    Log(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    L2Norm(Var),
    Scale(Var, f64),
    /// Per-sample CW hinge max(max_{j != y} z_j - z_y - kappa, 0).
    /// Saves the selected competitor index per row for the backward pass;
    /// hinge activity is read back from the forward values.
    CwHinge {
        logits: Var,
        labels: Vec<usize>,
        best_other: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of primitive operations over tape-owned tensors.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Rows and row width for softmax-style ops over the last axis.
fn rows_of(shape: &[usize]) -> (usize, usize) {
    let width = *shape.last().unwrap_or(&1);
    (numel(shape) / width.max(1), width)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of tensors currently on the tape.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Watermark the current tape length.
    pub fn mark(&self) -> TapeMark {
        TapeMark(self.nodes.len())
    }

    /// Drop every node created after `mark` and clear surviving gradients.
    ///
    /// Lets an attack loop keep model parameters bound once while rebuilding
    /// the per-iteration subgraph.
    pub fn rewind(&mut self, mark: TapeMark) {
        self.nodes.truncate(mark.0);
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Store a tensor, validating that the buffer fills the shape.
    pub fn leaf(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        if numel(shape) != values.len() {
            return Err(Error::invalid(format!(
                "tensor shape {:?} holds {} elements but buffer has {}",
                shape,
                numel(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, requires_grad, Op::Leaf))
    }

    /// Leaf that participates in gradients.
    pub fn variable(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, true)
    }

    /// Leaf excluded from gradients.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        self.leaf(shape, values, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Broadcast classification for elementwise binaries: equal shapes, or
    /// rhs equal to lhs minus its leading batch axis.
    fn broadcast_kind(&self, op: &'static str, a: Var, b: Var) -> Result<bool> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa == sb {
            return Ok(false);
        }
        if sa.len() == sb.len() + 1 && &sa[1..] == sb.as_slice() {
            return Ok(true);
        }
        Err(Error::ShapeMismatch {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let broadcast = self.broadcast_kind(op_name, a, b)?;
        let (va, vb) = (&self.nodes[a.0].values, &self.nodes[b.0].values);
        let out = if broadcast {
            let width = vb.len();
            let mut out = Vec::with_capacity(va.len());
            for (i, &x) in va.iter().enumerate() {
                out.push(f(x, vb[i % width]));
            }
            out
        } else {
            va.iter().zip(vb.iter()).map(|(&x, &y)| f(x, y)).collect()
        };
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(shape, out, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// 2-D matrix product `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(&self.nodes[a.0].values, &self.nodes[b.0].values, m, k, n);
        let rg = self.needs_grad(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(shape, out, rg, Op::Relu(x))
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v.ln()).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(shape, out, rg, Op::Log(x))
    }

    /// Row-wise softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (rows, width) = rows_of(&self.nodes[x.0].shape);
        let src = &self.nodes[x.0].values;
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - max).exp();
                denom += *o;
            }
            for o in &mut out[r * width..(r + 1) * width] {
                *o /= denom;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(shape, out, rg, Op::Softmax(x))
    }

    /// Row-wise log-softmax over the last axis via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (rows, width) = rows_of(&self.nodes[x.0].shape);
        let src = &self.nodes[x.0].values;
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            for (o, &v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(shape, out, rg, Op::LogSoftmax(x))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].values.iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(vec![1], vec![total], rg, Op::Sum(x))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].values.len().max(1);
        let total: f64 = self.nodes[x.0].values.iter().sum();
        let rg = self.needs_grad(&[x]);
        self.push(vec![1], vec![total / n as f64], rg, Op::Mean(x))
    }

    /// Euclidean norm of all elements, as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let total: f64 = self.nodes[x.0].values.iter().map(|&v| v * v).sum();
        let rg = self.needs_grad(&[x]);
        self.push(vec![1], vec![total.sqrt()], rg, Op::L2Norm(x))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.nodes[x.0].values.iter().map(|&v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.needs_grad(&[x]);
        self.push(shape, out, rg, Op::Scale(x, c))
    }

    /// Per-sample CW hinge `max(max_{j != y} z_j - z_y - kappa, 0)` over
    /// `[batch, classes]` logits. The gradient is zero wherever the hinge is
    /// inactive, which is exactly the CW gradient-vanishing regime.
    pub fn cw_hinge(&mut self, logits: Var, labels: &[usize], kappa: f64) -> Result<Var> {
        let shape = self.nodes[logits.0].shape.clone();
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "cw_hinge expects [batch, classes] logits, got {shape:?}"
            )));
        }
        let (batch, classes) = (shape[0], shape[1]);
        if classes < 2 {
            return Err(Error::invalid(
                "cw_hinge needs at least 2 classes".to_string(),
            ));
        }
        if labels.len() != batch {
            return Err(Error::invalid(format!(
                "cw_hinge got {} labels for batch {batch}",
                labels.len()
            )));
        }
        if kappa < 0.0 {
            return Err(Error::invalid(format!("cw_hinge kappa {kappa} < 0")));
        }
        let src = &self.nodes[logits.0].values;
        let mut out = vec![0.0; batch];
        let mut best_other = vec![0; batch];
        for b in 0..batch {
            let y = labels[b];
            if y >= classes {
                return Err(Error::invalid(format!(
                    "label {y} out of range for {classes} classes"
                )));
            }
            let row = &src[b * classes..(b + 1) * classes];
            let mut best = f64::NEG_INFINITY;
            let mut best_j = usize::MAX;
            for (j, &z) in row.iter().enumerate() {
                if j != y && z > best {
                    best = z;
                    best_j = j;
                }
            }
            best_other[b] = best_j;
            out[b] = (best - row[y] - kappa).max(0.0);
        }
        let rg = self.needs_grad(&[logits]);
        Ok(self.push(
            vec![batch],
            out,
            rg,
            Op::CwHinge {
                logits,
                labels: labels.to_vec(),
                best_other,
            },
        ))
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        let node = &mut self.nodes[v.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }

    /// Reduce an upstream gradient onto a broadcast rhs by summing over the
    /// leading batch axis.
    fn reduce_for(&self, target: Var, upstream: &[f64]) -> Vec<f64> {
        let width = self.nodes[target.0].values.len();
        if width == upstream.len() {
            return upstream.to_vec();
        }
        let mut out = vec![0.0; width];
        for (i, &g) in upstream.iter().enumerate() {
            out[i % width] += g;
        }
        out
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Gradients accumulate additively across fan-out; previous gradients on
    /// the tape are cleared first.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::invalid("backward on an empty tape".to_string()));
        }
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(upstream) = self.nodes[id].grad.clone() else {
                continue;
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    if self.requires_grad(a) {
                        self.accumulate(a, &upstream);
                    }
                    if self.requires_grad(b) {
                        let g = self.reduce_for(b, &upstream);
                        self.accumulate(b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.requires_grad(a) {
                        self.accumulate(a, &upstream);
                    }
                    if self.requires_grad(b) {
                        let mut g = self.reduce_for(b, &upstream);
                        for gi in &mut g {
                            *gi = -*gi;
                        }
                        self.accumulate(b, &g);
                    }
                }
                Op::Mul(a, b) => {
                    let broadcast = self.nodes[a.0].values.len() != self.nodes[b.0].values.len();
                    if self.requires_grad(a) {
                        let vb = &self.nodes[b.0].values;
                        let width = vb.len();
                        let g: Vec<f64> = upstream
                            .iter()
                            .enumerate()
                            .map(|(i, &u)| u * if broadcast { vb[i % width] } else { vb[i] })
                            .collect();
                        self.accumulate(a, &g);
                    }
                    if self.requires_grad(b) {
                        let va = &self.nodes[a.0].values;
                        let scaled: Vec<f64> =
                            upstream.iter().zip(va).map(|(&u, &x)| u * x).collect();
                        let g = self.reduce_for(b, &scaled);
                        self.accumulate(b, &g);
                    }
                }
                Op::Matmul(a, b) => {
                    let m = self.nodes[a.0].shape[0];
                    let k = self.nodes[a.0].shape[1];
                    let n = self.nodes[b.0].shape[1];
                    if self.requires_grad(a) {
                        // dA = dC @ B^T
                        let vb = &self.nodes[b.0].values;
                        let mut g = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let u = upstream[i * n + j];
                                if u != 0.0 {
                                    for kk in 0..k {
                                        g[i * k + kk] += u * vb[kk * n + j];
                                    }
                                }
                            }
                        }
                        self.accumulate(a, &g);
                    }
                    if self.requires_grad(b) {
                        // dB = A^T @ dC
                        let va = &self.nodes[a.0].values;
                        let mut g = vec![0.0; k * n];
                        for i in 0..m {
                            for kk in 0..k {
                                let x = va[i * k + kk];
                                if x != 0.0 {
                                    for j in 0..n {
                                        g[kk * n + j] += x * upstream[i * n + j];
                                    }
                                }
                            }
                        }
                        self.accumulate(b, &g);
                    }
                }
                Op::Relu(x) => {
                    if self.requires_grad(x) {
                        // Subgradient 0 at the kink.
                        let vx = &self.nodes[x.0].values;
                        let g: Vec<f64> = upstream
                            .iter()
                            .zip(vx)
                            .map(|(&u, &v)| if v > 0.0 { u } else { 0.0 })
                            .collect();
                        self.accumulate(x, &g);
                    }
                }
                Op::Log(x) => {
                    if self.requires_grad(x) {
                        let vx = &self.nodes[x.0].values;
                        let g: Vec<f64> = upstream.iter().zip(vx).map(|(&u, &v)| u / v).collect();
                        self.accumulate(x, &g);
                    }
                }
                Op::Softmax(x) => {
                    if self.requires_grad(x) {
                        let y = &self.nodes[id].values;
                        let (rows, width) = rows_of(&self.nodes[id].shape);
                        let mut g = vec![0.0; y.len()];
                        for r in 0..rows {
                            let ys = &y[r * width..(r + 1) * width];
                            let us = &upstream[r * width..(r + 1) * width];
                            let dot: f64 = ys.iter().zip(us).map(|(&yi, &ui)| yi * ui).sum();
                            for i in 0..width {
                                g[r * width + i] = ys[i] * (us[i] - dot);
                            }
                        }
                        self.accumulate(x, &g);
                    }
                }
                Op::LogSoftmax(x) => {
                    if self.requires_grad(x) {
                        let y = &self.nodes[id].values;
                        let (rows, width) = rows_of(&self.nodes[id].shape);
                        let mut g = vec![0.0; y.len()];
                        for r in 0..rows {
                            let ys = &y[r * width..(r + 1) * width];
                            let us = &upstream[r * width..(r + 1) * width];
                            let total: f64 = us.iter().sum();
                            for i in 0..width {
                                g[r * width + i] = us[i] - ys[i].exp() * total;
                            }
                        }
                        self.accumulate(x, &g);
                    }
                }
                Op::Sum(x) => {
                    if self.requires_grad(x) {
                        let g = vec![upstream[0]; self.nodes[x.0].values.len()];
                        self.accumulate(x, &g);
                    }
                }
                Op::Mean(x) => {
                    if self.requires_grad(x) {
                        let n = self.nodes[x.0].values.len().max(1);
                        let g = vec![upstream[0] / n as f64; self.nodes[x.0].values.len()];
                        self.accumulate(x, &g);
                    }
                }
                Op::L2Norm(x) => {
                    if self.requires_grad(x) {
                        let norm = self.nodes[id].values[0];
                        let vx = &self.nodes[x.0].values;
                        let g: Vec<f64> = if norm == 0.0 {
                            vec![0.0; vx.len()]
                        } else {
                            vx.iter().map(|&v| upstream[0] * v / norm).collect()
                        };
                        self.accumulate(x, &g);
                    }
                }
                Op::Scale(x, c) => {
                    if self.requires_grad(x) {
                        let g: Vec<f64> = upstream.iter().map(|&u| u * c).collect();
                        self.accumulate(x, &g);
                    }
                }
                Op::CwHinge {
                    logits,
                    labels,
                    best_other,
                } => {
                    if self.requires_grad(logits) {
                        let classes = self.nodes[logits.0].shape[1];
                        let active = &self.nodes[id].values;
                        let mut g = vec![0.0; self.nodes[logits.0].values.len()];
                        for (b, &u) in upstream.iter().enumerate() {
                            if active[b] > 0.0 {
                                g[b * classes + best_other[b]] += u;
                                g[b * classes + labels[b]] -= u;
                            }
                        }
                        self.accumulate(logits, &g);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Row-wise softmax over flat `[rows, width]` values, without a tape.
pub fn softmax_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, orow) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            denom += *o;
        }
        for o in orow.iter_mut() {
            *o /= denom;
        }
    }
    out
}

/// Row-wise log-softmax over flat `[rows, width]` values, without a tape.
pub fn log_softmax_rows(values: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    for (row, orow) in values.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    out
}

/// Row-major `[m,k] @ [k,n]` product.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..k {
            let x = a[i * k + kk];
            if x != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += x * bv;
                }
            }
        }
    }
    out
}
