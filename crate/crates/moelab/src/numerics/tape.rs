use std::cell::{Cell, RefCell};

use super::tensor::{Precision, Tensor};
use super::{NumericsError, Result};

/// Reverse-mode autodiff tape. Records one forward computation as a
/// topologically ordered node list and replays it backwards once.
///
/// Single-threaded by construction; independent tapes share nothing.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    mode: Precision,
    backward_run: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    /// A[m,k] · B[k,n]
    Matmul(usize, usize),
    /// A[m,k] · B[n,k]ᵀ
    MatmulNt(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Silu(usize),
    SoftmaxRows(usize),
    RmsNorm {
        x: usize,
        gain: usize,
        eps: f64,
    },
    CrossEntropyMasked {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    GatherRows {
        src: usize,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        src: usize,
        idx: Vec<usize>,
    },
    GatherElems {
        src: usize,
        idx: Vec<usize>,
    },
    RowScale {
        x: usize,
        w: usize,
    },
    LogSumExpRows(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanAxis0(usize),
    Reshape(usize),
    Rope {
        x: usize,
        head_dim: usize,
        base: f64,
    },
    SliceCols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<usize>),
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::MatmulNt(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::RowScale { x: a, w: b }
            | Op::RmsNorm { x: a, gain: b, .. } => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Silu(a)
            | Op::SoftmaxRows(a)
            | Op::CrossEntropyMasked { logits: a, .. }
            | Op::GatherRows { src: a, .. }
            | Op::ScatterAddRows { src: a, .. }
            | Op::GatherElems { src: a, .. }
            | Op::LogSumExpRows(a)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::MeanAxis0(a)
            | Op::Reshape(a)
            | Op::Rope { x: a, .. }
            | Op::SliceCols { x: a, .. } => vec![*a],
            Op::ConcatCols(parts) => parts.clone(),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::MatmulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Silu(..) => "silu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::CrossEntropyMasked { .. } => "cross_entropy_masked",
            Op::GatherRows { .. } => "gather_rows",
            Op::ScatterAddRows { .. } => "scatter_add_rows",
            Op::GatherElems { .. } => "gather_elems",
            Op::RowScale { .. } => "row_scale",
            Op::LogSumExpRows(..) => "logsumexp_rows",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::MeanAxis0(..) => "mean_axis0",
            Op::Reshape(..) => "reshape",
            Op::Rope { .. } => "rope",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
        }
    }
}

impl Tape {
    pub fn new(mode: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            mode,
            backward_run: Cell::new(false),
        }
    }

    pub fn mode(&self) -> Precision {
        self.mode
    }

    /// Record a leaf tensor. Gradients are only tracked when `requires_grad`.
    pub fn leaf(&self, mut value: Tensor, requires_grad: bool) -> Var<'_> {
        self.mode.round_slice(value.data_mut());
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that never receives a gradient (masks, positional tables, ...).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var<'_>) -> Tensor {
        self.nodes.borrow()[v.id].value.clone()
    }

    pub fn shape_of(&self, v: Var<'_>) -> Vec<usize> {
        self.nodes.borrow()[v.id].value.shape().to_vec()
    }

    /// Gradient of a recorded value, if one was computed by [`Tape::backward`].
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.id];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push(&self, value: Tensor, needs_grad: bool, op: Op) -> Var<'_> {
        #[cfg(debug_assertions)]
        {
            if !value.all_finite() {
                panic!("non-finite value produced by {}", op.name());
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        Var { tape: self, id }
    }

    fn record(&self, mut value: Tensor, op: Op) -> Var<'_> {
        self.mode.round_slice(value.data_mut());
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|&i| nodes[i].needs_grad)
        };
        self.push(value, needs_grad, op)
    }

    /// Run the backward pass from a scalar root. One pass per tape.
    pub fn backward(&self, root: Var<'_>) -> Result<()> {
        if self.backward_run.get() {
            return Err(NumericsError::DoubleBackward);
        }
        {
            let nodes = self.nodes.borrow();
            let shape = nodes[root.id].value.shape();
            if nodes[root.id].value.len() != 1 {
                return Err(NumericsError::NonScalarRoot(shape.to_vec()));
            }
        }
        self.backward_run.set(true);
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[root.id].needs_grad {
            return Ok(());
        }
        nodes[root.id].grad = Some(vec![1.0]);
        for i in (0..=root.id).rev() {
            if nodes[i].grad.is_none() {
                continue;
            }
            let gout = nodes[i].grad.as_ref().unwrap().clone();
            step_backward(&mut nodes, i, &gout, self.mode);
        }
        Ok(())
    }
}

/// Accumulate `contrib` into the gradient buffer of node `id`.
fn accum(nodes: &mut [Node], id: usize, contrib: &[f64], mode: Precision) {
    if !nodes[id].needs_grad {
        return;
    }
    let n = nodes[id].value.len();
    let grad = nodes[id].grad.get_or_insert_with(|| vec![0.0; n]);
    for (g, c) in grad.iter_mut().zip(contrib) {
        *g = mode.round(*g + mode.round(*c));
    }
}

fn step_backward(nodes: &mut Vec<Node>, i: usize, gout: &[f64], mode: Precision) {
    // Contributions are computed against immutable input values first,
    // then accumulated, to keep the borrows disjoint.
    match std::mem::replace(&mut nodes[i].op, Op::Leaf) {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (m, k) = (nodes[a].value.nrows(), nodes[a].value.ncols());
            let n = nodes[b].value.ncols();
            if nodes[a].needs_grad {
                let mut da = vec![0.0; m * k];
                mm_nt(gout, nodes[b].value.data(), m, k, n, &mut da);
                accum(nodes, a, &da, mode);
            }
            if nodes[b].needs_grad {
                let mut db = vec![0.0; k * n];
                mm_tn(nodes[a].value.data(), gout, m, k, n, &mut db);
                accum(nodes, b, &db, mode);
            }
            nodes[i].op = Op::Matmul(a, b);
        }
        Op::MatmulNt(a, b) => {
            let (m, k) = (nodes[a].value.nrows(), nodes[a].value.ncols());
            let n = nodes[b].value.nrows();
            if nodes[a].needs_grad {
                let mut da = vec![0.0; m * k];
                mm_nn(gout, nodes[b].value.data(), m, n, k, &mut da);
                accum(nodes, a, &da, mode);
            }
            if nodes[b].needs_grad {
                let mut db = vec![0.0; n * k];
                mm_tn(gout, nodes[a].value.data(), m, n, k, &mut db);
                accum(nodes, b, &db, mode);
            }
            nodes[i].op = Op::MatmulNt(a, b);
        }
        Op::Add(a, b) => {
            accum(nodes, a, gout, mode);
            accum(nodes, b, gout, mode);
            nodes[i].op = Op::Add(a, b);
        }
        Op::Sub(a, b) => {
            accum(nodes, a, gout, mode);
            let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
            accum(nodes, b, &neg, mode);
            nodes[i].op = Op::Sub(a, b);
        }
        Op::Mul(a, b) => {
            if nodes[a].needs_grad {
                let da: Vec<f64> = gout
                    .iter()
                    .zip(nodes[b].value.data())
                    .map(|(g, y)| g * y)
                    .collect();
                accum(nodes, a, &da, mode);
            }
            if nodes[b].needs_grad {
                let db: Vec<f64> = gout
                    .iter()
                    .zip(nodes[a].value.data())
                    .map(|(g, x)| g * x)
                    .collect();
                accum(nodes, b, &db, mode);
            }
            nodes[i].op = Op::Mul(a, b);
        }
        Op::Scale(a, c) => {
            let da: Vec<f64> = gout.iter().map(|g| g * c).collect();
            accum(nodes, a, &da, mode);
            nodes[i].op = Op::Scale(a, c);
        }
        Op::Silu(a) => {
            let da: Vec<f64> = gout
                .iter()
                .zip(nodes[a].value.data())
                .map(|(g, &x)| {
                    let s = sigmoid(x);
                    g * s * (1.0 + x * (1.0 - s))
                })
                .collect();
            accum(nodes, a, &da, mode);
            nodes[i].op = Op::Silu(a);
        }
        Op::SoftmaxRows(a) => {
            let y = &nodes[i].value;
            let (n, m) = (y.nrows(), y.ncols());
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                let yr = &y.data()[r * m..(r + 1) * m];
                let gr = &gout[r * m..(r + 1) * m];
                let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                for c in 0..m {
                    da[r * m + c] = yr[c] * (gr[c] - dot);
                }
            }
            accum(nodes, a, &da, mode);
            nodes[i].op = Op::SoftmaxRows(a);
        }
        Op::RmsNorm { x, gain, eps } => {
            let (n, d) = (nodes[x].value.nrows(), nodes[x].value.ncols());
            let xd = nodes[x].value.data();
            let gd = nodes[gain].value.data();
            let mut dx = vec![0.0; n * d];
            let mut dgain = vec![0.0; d];
            for r in 0..n {
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &gout[r * d..(r + 1) * d];
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                let proj: f64 = (0..d).map(|c| gr[c] * gd[c] * xr[c]).sum();
                for c in 0..d {
                    dx[r * d + c] =
                        gd[c] * inv * gr[c] - xr[c] * inv.powi(3) / d as f64 * proj;
                    dgain[c] += gr[c] * xr[c] * inv;
                }
            }
            if nodes[x].needs_grad {
                accum(nodes, x, &dx, mode);
            }
            if nodes[gain].needs_grad {
                accum(nodes, gain, &dgain, mode);
            }
            nodes[i].op = Op::RmsNorm { x, gain, eps };
        }
        Op::CrossEntropyMasked {
            logits,
            targets,
            mask,
        } => {
            let (t, v) = (nodes[logits].value.nrows(), nodes[logits].value.ncols());
            let ld = nodes[logits].value.data();
            let n_masked = mask.iter().filter(|&&m| m).count() as f64;
            let g = gout[0] / n_masked;
            let mut dl = vec![0.0; t * v];
            for r in 0..t {
                if !mask[r] {
                    continue;
                }
                let lr = &ld[r * v..(r + 1) * v];
                let probs = softmax_slice(lr);
                for c in 0..v {
                    dl[r * v + c] = g * (probs[c] - if c == targets[r] { 1.0 } else { 0.0 });
                }
            }
            accum(nodes, logits, &dl, mode);
            nodes[i].op = Op::CrossEntropyMasked {
                logits,
                targets,
                mask,
            };
        }
        Op::GatherRows { src, idx } => {
            let d = nodes[src].value.ncols();
            let mut ds = vec![0.0; nodes[src].value.len()];
            for (r, &s) in idx.iter().enumerate() {
                for c in 0..d {
                    ds[s * d + c] += gout[r * d + c];
                }
            }
            accum(nodes, src, &ds, mode);
            nodes[i].op = Op::GatherRows { src, idx };
        }
        Op::ScatterAddRows { src, idx } => {
            let d = nodes[src].value.ncols();
            let mut ds = vec![0.0; nodes[src].value.len()];
            for (r, &dest) in idx.iter().enumerate() {
                ds[r * d..(r + 1) * d].copy_from_slice(&gout[dest * d..(dest + 1) * d]);
            }
            accum(nodes, src, &ds, mode);
            nodes[i].op = Op::ScatterAddRows { src, idx };
        }
        Op::GatherElems { src, idx } => {
            let mut ds = vec![0.0; nodes[src].value.len()];
            for (r, &s) in idx.iter().enumerate() {
                ds[s] += gout[r];
            }
            accum(nodes, src, &ds, mode);
            nodes[i].op = Op::GatherElems { src, idx };
        }
        Op::RowScale { x, w } => {
            let (n, d) = (nodes[x].value.nrows(), nodes[x].value.ncols());
            if nodes[x].needs_grad {
                let wd = nodes[w].value.data();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    for c in 0..d {
                        dx[r * d + c] = gout[r * d + c] * wd[r];
                    }
                }
                accum(nodes, x, &dx, mode);
            }
            if nodes[w].needs_grad {
                let xd = nodes[x].value.data();
                let mut dw = vec![0.0; n];
                for r in 0..n {
                    for c in 0..d {
                        dw[r] += gout[r * d + c] * xd[r * d + c];
                    }
                }
                accum(nodes, w, &dw, mode);
            }
            nodes[i].op = Op::RowScale { x, w };
        }
        Op::LogSumExpRows(a) => {
            let (n, m) = (nodes[a].value.nrows(), nodes[a].value.ncols());
            let ad = nodes[a].value.data();
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                let probs = softmax_slice(&ad[r * m..(r + 1) * m]);
                for c in 0..m {
                    da[r * m + c] = gout[r] * probs[c];
                }
            }
            accum(nodes, a, &da, mode);
            nodes[i].op = Op::LogSumExpRows(a);
        }
        Op::SumAll(a) => {
            let da = vec![gout[0]; nodes[a].value.len()];
            accum(nodes, a, &da, mode);
            nodes[i].op = Op::SumAll(a);
        }
        Op::MeanAll(a) => {
            let n = nodes[a].value.len();
            let da = vec![gout[0] / n as f64; n];
            accum(nodes, a, &da, mode);
            nodes[i].op = Op::MeanAll(a);
        }
        Op::MeanAxis0(a) => {
            let (n, m) = (nodes[a].value.nrows(), nodes[a].value.ncols());
            let mut da = vec![0.0; n * m];
            for r in 0..n {
                for c in 0..m {
                    da[r * m + c] = gout[c] / n as f64;
                }
            }
            accum(nodes, a, &da, mode);
            nodes[i].op = Op::MeanAxis0(a);
        }
        Op::Reshape(a) => {
            accum(nodes, a, gout, mode);
            nodes[i].op = Op::Reshape(a);
        }
        Op::Rope { x, head_dim, base } => {
            let (t, d) = (nodes[x].value.nrows(), nodes[x].value.ncols());
            let mut dx = vec![0.0; t * d];
            // Inverse rotation (angle negated) applied to the output gradient.
            rope_apply(gout, &mut dx, t, d, head_dim, base, -1.0);
            accum(nodes, x, &dx, mode);
            nodes[i].op = Op::Rope { x, head_dim, base };
        }
        Op::SliceCols { x, start, len } => {
            let (n, d) = (nodes[x].value.nrows(), nodes[x].value.ncols());
            let mut dx = vec![0.0; n * d];
            for r in 0..n {
                for c in 0..len {
                    dx[r * d + start + c] = gout[r * len + c];
                }
            }
            accum(nodes, x, &dx, mode);
            nodes[i].op = Op::SliceCols { x, start, len };
        }
        Op::ConcatCols(parts) => {
            let n = nodes[i].value.nrows();
            let total = nodes[i].value.ncols();
            let mut offset = 0;
            for &p in &parts {
                let w = nodes[p].value.ncols();
                if nodes[p].needs_grad {
                    let mut dp = vec![0.0; n * w];
                    for r in 0..n {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&gout[r * total + offset..r * total + offset + w]);
                    }
                    accum(nodes, p, &dp, mode);
                }
                offset += w;
            }
            nodes[i].op = Op::ConcatCols(parts);
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    out
}

/// out += A[m,k] · B[k,n]
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += A[m,k] · B[n,k]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            out[i * n + j] += dot;
        }
    }
}

/// out += A[m,k]ᵀ · B[m,n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..m {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..k {
            let av = a[p * k + i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// Rotary rotation of row t by angle sign·t·θᵢ, pairwise within each head.
fn rope_apply(src: &[f64], dst: &mut [f64], t: usize, d: usize, head_dim: usize, base: f64, sign: f64) {
    let half = head_dim / 2;
    for row in 0..t {
        for head_start in (0..d).step_by(head_dim) {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
                let angle = sign * row as f64 * theta;
                let (sin, cos) = angle.sin_cos();
                let ia = row * d + head_start + 2 * i;
                let ib = ia + 1;
                let (a, b) = (src[ia], src[ib]);
                dst[ia] = a * cos - b * sin;
                dst[ib] = a * sin + b * cos;
            }
        }
    }
}

fn dim_err(msg: String) -> NumericsError {
    NumericsError::DimensionMismatch(msg)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(*self)
    }

    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad(*self)
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    fn shape2(&self) -> Result<(usize, usize)> {
        self.with_value(|v| {
            if v.shape().len() == 2 {
                Ok((v.shape()[0], v.shape()[1]))
            } else {
                Err(dim_err(format!("expected 2-D tensor, got {:?}", v.shape())))
            }
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.shape2()?;
        let (k2, n) = other.shape2()?;
        if k != k2 {
            return Err(dim_err(format!("matmul: [{m}x{k}] · [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            mm_nn(
                nodes[self.id].value.data(),
                nodes[other.id].value.data(),
                m,
                k,
                n,
                &mut out,
            );
        }
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        Ok(self.tape.record(value, Op::Matmul(self.id, other.id)))
    }

    /// self · otherᵀ
    pub fn matmul_nt(self, other: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.shape2()?;
        let (n, k2) = other.shape2()?;
        if k != k2 {
            return Err(dim_err(format!("matmul_nt: [{m}x{k}] · [{n}x{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            mm_nt(
                nodes[self.id].value.data(),
                nodes[other.id].value.data(),
                m,
                n,
                k,
                &mut out,
            );
        }
        let value = Tensor::new(vec![m, n], out).expect("matmul_nt shape");
        Ok(self.tape.record(value, Op::MatmulNt(self.id, other.id)))
    }

    fn zip_elementwise(
        self,
        other: Var<'t>,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let b = &nodes[other.id].value;
            if a.shape() != b.shape() {
                return Err(dim_err(format!(
                    "{name}: shapes {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
            )
            .expect("elementwise shape")
        };
        Ok(self.tape.record(value, op))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_elementwise(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_elementwise(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.zip_elementwise(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let value = self.with_value(|v| {
            Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect()).unwrap()
        });
        self.tape.record(value, Op::Scale(self.id, c))
    }

    pub fn silu(self) -> Var<'t> {
        let value = self.with_value(|v| {
            Tensor::new(
                v.shape().to_vec(),
                v.data().iter().map(|&x| x * sigmoid(x)).collect(),
            )
            .unwrap()
        });
        self.tape.record(value, Op::Silu(self.id))
    }

    /// Row-wise softmax of a 2-D tensor, max-subtracted for stability.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let (n, m) = self.shape2()?;
        let value = self.with_value(|v| {
            let mut out = vec![0.0; n * m];
            for r in 0..n {
                out[r * m..(r + 1) * m].copy_from_slice(&softmax_slice(v.row(r)));
            }
            Tensor::new(vec![n, m], out).unwrap()
        });
        Ok(self.tape.record(value, Op::SoftmaxRows(self.id)))
    }

    /// yᵢ = gainᵢ · xᵢ / sqrt(mean(x²) + eps), per row.
    pub fn rmsnorm(self, gain: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (n, d) = self.shape2()?;
        let gain_len = gain.with_value(|g| g.len());
        if gain_len != d {
            return Err(dim_err(format!("rmsnorm: gain len {gain_len} vs width {d}")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let g = &nodes[gain.id].value;
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                let xr = x.row(r);
                let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
                let inv = 1.0 / (ms + eps).sqrt();
                for c in 0..d {
                    out[r * d + c] = g.data()[c] * xr[c] * inv;
                }
            }
            Tensor::new(vec![n, d], out).unwrap()
        };
        Ok(self.tape.record(
            value,
            Op::RmsNorm {
                x: self.id,
                gain: gain.id,
                eps,
            },
        ))
    }

    /// Mean negative log-likelihood over positions where `mask` is true.
    pub fn cross_entropy_masked(self, targets: &[usize], mask: &[bool]) -> Result<Var<'t>> {
        let (t, v) = self.shape2()?;
        if targets.len() != t || mask.len() != t {
            return Err(dim_err(format!(
                "cross_entropy_masked: {t} rows vs {} targets / {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(NumericsError::EmptyMask);
        }
        for (&tgt, &m) in targets.iter().zip(mask) {
            if m && tgt >= v {
                return Err(NumericsError::IndexOutOfBounds { index: tgt, size: v });
            }
        }
        let value = self.with_value(|logits| {
            let mut total = 0.0;
            let mut count = 0usize;
            for r in 0..t {
                if !mask[r] {
                    continue;
                }
                let lr = logits.row(r);
                let max = lr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + lr.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                total += lse - lr[targets[r]];
                count += 1;
            }
            Tensor::scalar(total / count as f64)
        });
        Ok(self.tape.record(
            value,
            Op::CrossEntropyMasked {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn gather_rows(self, idx: &[usize]) -> Result<Var<'t>> {
        let (n, d) = self.shape2()?;
        if let Some(&bad) = idx.iter().find(|&&r| r >= n) {
            return Err(NumericsError::IndexOutOfBounds { index: bad, size: n });
        }
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(idx.len() * d);
            for &r in idx {
                out.extend_from_slice(v.row(r));
            }
            Tensor::new(vec![idx.len(), d], out).unwrap()
        });
        Ok(self.tape.record(
            value,
            Op::GatherRows {
                src: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scatter rows of `self` into a zero tensor with `out_rows` rows,
    /// adding on collision.
    pub fn scatter_add_rows(self, idx: &[usize], out_rows: usize) -> Result<Var<'t>> {
        let (n, d) = self.shape2()?;
        if idx.len() != n {
            return Err(dim_err(format!(
                "scatter_add_rows: {n} rows vs {} indices",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&r| r >= out_rows) {
            return Err(NumericsError::IndexOutOfBounds {
                index: bad,
                size: out_rows,
            });
        }
        let value = self.with_value(|v| {
            let mut out = vec![0.0; out_rows * d];
            for (r, &dest) in idx.iter().enumerate() {
                let src = v.row(r);
                for c in 0..d {
                    out[dest * d + c] += src[c];
                }
            }
            Tensor::new(vec![out_rows, d], out).unwrap()
        });
        Ok(self.tape.record(
            value,
            Op::ScatterAddRows {
                src: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Gather flat element positions into a 1-D tensor.
    pub fn gather_elems(self, idx: &[usize]) -> Result<Var<'t>> {
        let len = self.with_value(|v| v.len());
        if let Some(&bad) = idx.iter().find(|&&i| i >= len) {
            return Err(NumericsError::IndexOutOfBounds {
                index: bad,
                size: len,
            });
        }
        let value = self.with_value(|v| {
            Tensor::new(vec![idx.len()], idx.iter().map(|&i| v.data()[i]).collect()).unwrap()
        });
        Ok(self.tape.record(
            value,
            Op::GatherElems {
                src: self.id,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Multiply row r of `self` by w[r].
    pub fn row_scale(self, w: Var<'t>) -> Result<Var<'t>> {
        let (n, d) = self.shape2()?;
        let wlen = w.with_value(|v| v.len());
        if wlen != n {
            return Err(dim_err(format!("row_scale: {n} rows vs {wlen} weights")));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let wv = &nodes[w.id].value;
            let mut out = vec![0.0; n * d];
            for r in 0..n {
                let xr = x.row(r);
                for c in 0..d {
                    out[r * d + c] = xr[c] * wv.data()[r];
                }
            }
            Tensor::new(vec![n, d], out).unwrap()
        };
        Ok(self.tape.record(
            value,
            Op::RowScale {
                x: self.id,
                w: w.id,
            },
        ))
    }

    /// Per-row logsumexp of a 2-D tensor, output shape [rows].
    pub fn logsumexp_rows(self) -> Result<Var<'t>> {
        let (n, _m) = self.shape2()?;
        let value = self.with_value(|v| {
            let mut out = vec![0.0; n];
            for r in 0..n {
                let row = v.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                out[r] = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            }
            Tensor::new(vec![n], out).unwrap()
        });
        Ok(self.tape.record(value, Op::LogSumExpRows(self.id)))
    }

    pub fn sum_all(self) -> Var<'t> {
        let value = self.with_value(|v| Tensor::scalar(v.data().iter().sum()));
        self.tape.record(value, Op::SumAll(self.id))
    }

    pub fn mean_all(self) -> Var<'t> {
        let value =
            self.with_value(|v| Tensor::scalar(v.data().iter().sum::<f64>() / v.len() as f64));
        self.tape.record(value, Op::MeanAll(self.id))
    }

    /// Column means of a 2-D tensor, output shape [cols].
    pub fn mean_axis0(self) -> Result<Var<'t>> {
        let (n, m) = self.shape2()?;
        let value = self.with_value(|v| {
            let mut out = vec![0.0; m];
            for r in 0..n {
                for c in 0..m {
                    out[c] += v.data()[r * m + c];
                }
            }
            for o in out.iter_mut() {
                *o /= n as f64;
            }
            Tensor::new(vec![m], out).unwrap()
        });
        Ok(self.tape.record(value, Op::MeanAxis0(self.id)))
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Var<'t>> {
        let len = self.with_value(|v| v.len());
        let expected: usize = shape.iter().product();
        if expected != len {
            return Err(NumericsError::BadShape {
                expected,
                got: len,
                shape,
            });
        }
        let value = self.with_value(|v| Tensor::new(shape.clone(), v.data().to_vec()).unwrap());
        Ok(self.tape.record(value, Op::Reshape(self.id)))
    }

    /// Rotary positional rotation; row index is the position.
    pub fn rope(self, head_dim: usize, base: f64) -> Result<Var<'t>> {
        let (t, d) = self.shape2()?;
        if head_dim == 0 || head_dim % 2 != 0 || d % head_dim != 0 {
            return Err(dim_err(format!(
                "rope: width {d} not a multiple of even head_dim {head_dim}"
            )));
        }
        let value = self.with_value(|v| {
            let mut out = vec![0.0; t * d];
            rope_apply(v.data(), &mut out, t, d, head_dim, base, 1.0);
            Tensor::new(vec![t, d], out).unwrap()
        });
        Ok(self.tape.record(
            value,
            Op::Rope {
                x: self.id,
                head_dim,
                base,
            },
        ))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let (n, d) = self.shape2()?;
        if start + len > d {
            return Err(dim_err(format!(
                "slice_cols: [{start}, {}) out of width {d}",
                start + len
            )));
        }
        let value = self.with_value(|v| {
            let mut out = Vec::with_capacity(n * len);
            for r in 0..n {
                out.extend_from_slice(&v.row(r)[start..start + len]);
            }
            Tensor::new(vec![n, len], out).unwrap()
        });
        Ok(self.tape.record(
            value,
            Op::SliceCols {
                x: self.id,
                start,
                len,
            },
        ))
    }
}

impl Tape {
    /// Concatenate 2-D tensors along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let n = nodes[parts[0].id].value.nrows();
            for p in parts {
                if nodes[p.id].value.nrows() != n {
                    return Err(dim_err("concat_cols: row counts differ".into()));
                }
            }
            let total: usize = parts.iter().map(|p| nodes[p.id].value.ncols()).sum();
            let mut out = Vec::with_capacity(n * total);
            for r in 0..n {
                for p in parts {
                    out.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            Tensor::new(vec![n, total], out).unwrap()
        };
        Ok(self.record(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }
}
