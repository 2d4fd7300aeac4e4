//! Tape of tensor operations with reverse-mode gradient accumulation.
//!
//! Nodes are appended in evaluation order, so the node vector is already a
//! topological order and backward simply walks it in reverse.

use crate::autodiff::kernels;
use crate::autodiff::Segments;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added to divisors and square roots.
pub const EPS: f64 = 1e-8;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// How the right operand of a binary op maps onto the left operand's layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// One value per row of a `[R × C]` left operand.
    Rows {
        cols: usize,
    },
    /// One value per column of a `[R × C]` left operand.
    Cols {
        cols: usize,
    },
}

impl Broadcast {
    fn resolve(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        if rhs.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        if let [r, c] = lhs {
            match rhs {
                [n] | [n, 1] if n == r => return Ok(Broadcast::Rows { cols: *c }),
                [1, n] if n == c => return Ok(Broadcast::Cols { cols: *c }),
                _ => {}
            }
        }
        Err(Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }

    #[inline]
    fn index(self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Rows { cols } => i / cols,
            Broadcast::Cols { cols } => i % cols,
        }
    }
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        bcast: Broadcast,
    },
    Relu(Var),
    Sqrt(Var),
    Pow(Var, f64),
    Affine {
        x: Var,
        scale: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    SegmentMean {
        x: Var,
        segs: Segments,
    },
    SegmentExpand {
        x: Var,
        segs: Segments,
    },
    Conv1d {
        x: Var,
        w: Var,
        dilation: usize,
        segs: Segments,
    },
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    AngularMargin {
        cos: Var,
        labels: Vec<usize>,
        margin: f64,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Binary { kind, .. } => match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            },
            Op::Relu(_) => "relu",
            Op::Sqrt(_) => "sqrt",
            Op::Pow(..) => "pow",
            Op::Affine { .. } => "affine",
            Op::Softmax { .. } => "softmax",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::SegmentMean { .. } => "segment_mean",
            Op::SegmentExpand { .. } => "segment_expand",
            Op::Conv1d { .. } => "conv1d",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::BatchNorm { .. } => "batch_norm",
            Op::AngularMargin { .. } => "angular_margin",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t, false)
    }

    /// Differentiable input (a parameter or an input under test).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_unchecked(Op::Leaf, t, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Clears every gradient so `backward` may run again.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
        self.backward_done = false;
    }

    fn push_unchecked(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(op, value, requires_grad))
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = &self.nodes[v.0].value;
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            [r] => Ok((*r, 1)),
            s => Err(Error::Shape(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Op::MatMul(a, b), Tensor::new(vec![m, n], out)?, &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let out = kernels::transpose(self.value(x).data(), r, c);
        self.push(Op::Transpose(x), Tensor::new(vec![c, r], out)?, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone();
        let mut t = t.reshaped(shape.to_vec())?;
        t.grad = None;
        self.push(Op::Reshape(x), t, &[x])
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = Op::Binary {
            kind,
            a,
            b,
            bcast: Broadcast::Same,
        }
        .name();
        let bcast = Broadcast::resolve(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f64> = match kind {
            BinaryKind::Add => av
                .iter()
                .enumerate()
                .map(|(i, x)| x + bv[bcast.index(i)])
                .collect(),
            BinaryKind::Sub => av
                .iter()
                .enumerate()
                .map(|(i, x)| x - bv[bcast.index(i)])
                .collect(),
            BinaryKind::Mul => av
                .iter()
                .enumerate()
                .map(|(i, x)| x * bv[bcast.index(i)])
                .collect(),
            BinaryKind::Div => av
                .iter()
                .enumerate()
                .map(|(i, x)| x / guard(bv[bcast.index(i)]))
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        self.push(
            Op::Binary { kind, a, b, bcast },
            Tensor::new(shape, out)?,
            &[a, b],
        )
    }

    /// Element-wise `a + b`; `b` may broadcast per row, per column or as a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    /// `a / b` with the divisor pushed away from zero by [`EPS`].
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| v.max(0.0))?;
        self.push(Op::Relu(x), t, &[x])
    }

    /// `sqrt(x + EPS)`.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let t = self.map(x, |v| (v + EPS).sqrt())?;
        self.push(Op::Sqrt(x), t, &[x])
    }

    pub fn pow(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let t = self.map(x, |v| v.powf(exponent))?;
        self.push(Op::Pow(x, exponent), t, &[x])
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let t = self.map(x, |v| scale * v + shift)?;
        self.push(Op::Affine { x, scale }, t, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = self.value(x);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n)
                    .map(|k| src[idx(k)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    out[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[idx(k)] /= total;
                }
            }
        }
        self.push(Op::Softmax { x, axis }, Tensor::new(shape, out)?, &[x])
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s), &[x])
    }

    /// Sum of a matrix along `axis`, keeping it as a length-1 dimension.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "sum_axis")?;
        let src = self.value(x).data();
        let t = match axis {
            0 => {
                let mut out = vec![0.0; c];
                for row in src.chunks_exact(c) {
                    for (o, v) in out.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                Tensor::new(vec![1, c], out)?
            }
            1 => Tensor::new(
                vec![r, 1],
                src.chunks_exact(c).map(|row| row.iter().sum()).collect(),
            )?,
            _ => return Err(Error::Shape(format!("sum_axis: axis {axis} on a matrix"))),
        };
        self.push(Op::SumAxis { x, axis }, t, &[x])
    }

    /// Per-segment time average: `[C × ΣT] → [C × segments]`.
    pub fn segment_mean(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let (c, t) = self.dims2(x, "segment_mean")?;
        check_frames("segment_mean", t, segs)?;
        let src = self.value(x).data();
        let n = segs.len();
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let row = &src[ch * t..(ch + 1) * t];
            for (j, (off, len)) in segs.iter().enumerate() {
                out[ch * n + j] = row[off..off + len].iter().sum::<f64>() / len as f64;
            }
        }
        self.push(
            Op::SegmentMean {
                x,
                segs: segs.clone(),
            },
            Tensor::new(vec![c, n], out)?,
            &[x],
        )
    }

    /// Repeats each per-segment column across that segment's frames.
    pub fn segment_expand(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let (c, n) = self.dims2(x, "segment_expand")?;
        if n != segs.len() {
            return Err(Error::Shape(format!(
                "segment_expand: {n} columns for {} segments",
                segs.len()
            )));
        }
        let t = segs.total();
        let src = self.value(x).data();
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            for (j, (off, len)) in segs.iter().enumerate() {
                out[ch * t + off..ch * t + off + len].fill(src[ch * n + j]);
            }
        }
        self.push(
            Op::SegmentExpand {
                x,
                segs: segs.clone(),
            },
            Tensor::new(vec![c, t], out)?,
            &[x],
        )
    }

    /// Dilated temporal cross-correlation with "same" zero padding.
    ///
    /// `x` is `[C_in × T]`, `w` is `[C_out × C_in × K]` with odd `K`.
    pub fn conv1d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let (_, t) = self.dims2(x, "conv1d")?;
        self.conv1d_segments(x, w, dilation, &Segments::single(t))
    }

    /// [`Graph::conv1d`] over a packed batch, padding at every segment boundary.
    pub fn conv1d_segments(
        &mut self,
        x: Var,
        w: Var,
        dilation: usize,
        segs: &Segments,
    ) -> Result<Var> {
        let (c_in, t) = self.dims2(x, "conv1d")?;
        let (c_out, wc_in, k) = match self.shape(w) {
            [a, b, c] => (*a, *b, *c),
            s => {
                return Err(Error::Shape(format!(
                    "conv1d weight must be rank 3, got {s:?}"
                )))
            }
        };
        if wc_in != c_in {
            return Err(Error::Dimension {
                op: "conv1d",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(w).to_vec(),
            });
        }
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel size must be odd, got {k}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be at least 1".into()));
        }
        check_frames("conv1d", t, segs)?;
        let span = (k - 1) * dilation;
        if segs.min_len() <= span {
            return Err(Error::SequenceLength {
                op: "conv1d",
                frames: segs.min_len(),
                required: span,
            });
        }
        let geom = kernels::ConvGeom {
            c_in,
            c_out,
            k,
            dilation,
            frames: t,
        };
        let mut out = vec![0.0; c_out * t];
        kernels::conv1d_forward(
            &geom,
            segs,
            self.value(x).data(),
            self.value(w).data(),
            &mut out,
        );
        self.push(
            Op::Conv1d {
                x,
                w,
                dilation,
                segs: segs.clone(),
            },
            Tensor::new(vec![c_out, t], out)?,
            &[x, w],
        )
    }

    /// Stacks matrices with equal column counts along the row axis.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_rows of nothing".into()));
        }
        let (_, cols) = self.dims2(xs[0], "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &x in xs {
            let (r, c) = self.dims2(x, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: self.shape(x).to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(self.value(x).data());
        }
        self.push(
            Op::ConcatRows(xs.to_vec()),
            Tensor::new(vec![rows, cols], out)?,
            xs,
        )
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::Shape(format!(
                "slice_rows {start}..{} out of {r} rows",
                start + len
            )));
        }
        let out = self.value(x).data()[start * c..(start + len) * c].to_vec();
        self.push(
            Op::SliceRows { x, start },
            Tensor::new(vec![len, c], out)?,
            &[x],
        )
    }

    /// Batch normalization of `[C × N]` over the column axis using batch statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (c, n) = self.dims2(x, "batch_norm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::Dimension {
                    op: "batch_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        let mut inv_std = vec![0.0; c];
        let mut xhat = vec![0.0; c * n];
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            let row = &src[ch * n..(ch + 1) * n];
            let mu = row.iter().sum::<f64>() / n as f64;
            let v = row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (v + eps).sqrt();
            mean[ch] = mu;
            var[ch] = v;
            inv_std[ch] = is;
            for j in 0..n {
                let h = (row[j] - mu) * is;
                xhat[ch * n + j] = h;
                out[ch * n + j] = g[ch] * h + b[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            Tensor::new(shape, out)?,
            &[x, gamma, beta],
        )?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Additive angular margin on cosine logits `[B × N]`.
    ///
    /// Every cosine is clamped to `[-1 + 1e-7, 1 - 1e-7]`; the entry of each
    /// row's label becomes `cos(acos(c) + margin)`.
    pub fn angular_margin(&mut self, cos: Var, labels: &[usize], margin: f64) -> Result<Var> {
        let (b, n) = self.dims2(cos, "angular_margin")?;
        check_labels(labels, b, n)?;
        let src = self.value(cos).data();
        let mut out: Vec<f64> = src
            .iter()
            .map(|&c| c.clamp(-COS_LIMIT, COS_LIMIT))
            .collect();
        for (row, &y) in labels.iter().enumerate() {
            let c = out[row * n + y];
            out[row * n + y] = (c.acos() + margin).cos();
        }
        let shape = self.shape(cos).to_vec();
        self.push(
            Op::AngularMargin {
                cos,
                labels: labels.to_vec(),
                margin,
            },
            Tensor::new(shape, out)?,
            &[cos],
        )
    }

    /// Mean softmax cross-entropy of logits `[B × N]` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, n) = self.dims2(logits, "cross_entropy")?;
        check_labels(labels, b, n)?;
        let src = self.value(logits).data();
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for (row, &y) in labels.iter().enumerate() {
            let z = &src[row * n..(row + 1) * n];
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let log_total = total.ln() + max;
            loss += log_total - z[y];
            for k in 0..n {
                probs[row * n + k] = (z[k] - log_total).exp();
            }
        }
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            Tensor::scalar(loss / b as f64),
            &[logits],
        )
    }

    /// Hash of every ReLU and clamp decision in the graph.
    ///
    /// Two evaluations with equal signatures lie on the same smooth piece of
    /// the function, which is what a finite-difference check needs.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        feed(v > 0.0);
                    }
                }
                Op::AngularMargin { cos, .. } => {
                    for &v in self.nodes[cos.0].value.data() {
                        feed(v.abs() < COS_LIMIT);
                    }
                }
                _ => {}
            }
        }
        h
    }

    // ----------------------------------------------------------- backward

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} is not part of this graph",
                loss.0
            )));
        }
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran; call zero_grad before running it again".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Graph(
                "loss does not depend on any differentiable input".into(),
            ));
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if self.nodes[idx].requires_grad {
                    self.nodes[idx].value.grad = Some(g);
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims2(*a, "matmul")?;
                let (_, n) = self.dims2(*b, "matmul")?;
                if needs(*a) {
                    let ga = acc(grads, *a, m * k);
                    kernels::matmul_nt_acc(gy, val(*b), ga, m, n, k);
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    kernels::matmul_tn_acc(val(*a), gy, gb, m, k, n);
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    let (r, c) = self.dims2(*x, "transpose")?;
                    let t = kernels::transpose(gy, c, r);
                    add_into(acc(grads, *x, r * c), &t);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    add_into(acc(grads, *x, gy.len()), gy);
                }
            }
            Op::Binary { kind, a, b, bcast } => {
                let av = val(*a);
                let bv = val(*b);
                if needs(*a) {
                    let ga = acc(grads, *a, av.len());
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => add_into(ga, gy),
                        BinaryKind::Mul => {
                            for i in 0..gy.len() {
                                ga[i] += gy[i] * bv[bcast.index(i)];
                            }
                        }
                        BinaryKind::Div => {
                            for i in 0..gy.len() {
                                ga[i] += gy[i] / guard(bv[bcast.index(i)]);
                            }
                        }
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, bv.len());
                    for i in 0..gy.len() {
                        let j = bcast.index(i);
                        gb[j] += match kind {
                            BinaryKind::Add => gy[i],
                            BinaryKind::Sub => -gy[i],
                            BinaryKind::Mul => gy[i] * av[i],
                            BinaryKind::Div => {
                                let d = guard(bv[j]);
                                -gy[i] * av[i] / (d * d)
                            }
                        };
                    }
                }
            }
            Op::Relu(x) => {
                if needs(*x) {
                    let xv = val(*x);
                    let gx = acc(grads, *x, xv.len());
                    for i in 0..gy.len() {
                        if xv[i] > 0.0 {
                            gx[i] += gy[i];
                        }
                    }
                }
            }
            Op::Sqrt(x) => {
                if needs(*x) {
                    let gx = acc(grads, *x, y.len());
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * 0.5 / y[i];
                    }
                }
            }
            Op::Pow(x, p) => {
                if needs(*x) {
                    let xv = val(*x);
                    let gx = acc(grads, *x, xv.len());
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * p * xv[i].powf(p - 1.0);
                    }
                }
            }
            Op::Affine { x, scale } => {
                if needs(*x) {
                    let gx = acc(grads, *x, y.len());
                    for i in 0..gy.len() {
                        gx[i] += gy[i] * scale;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if needs(*x) {
                    let (outer, n, inner) = axis_split(node.value.shape(), *axis)?;
                    let gx = acc(grads, *x, y.len());
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| o * n * inner + k * inner + i;
                            let dot: f64 = (0..n).map(|k| gy[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                gx[idx(k)] += y[idx(k)] * (gy[idx(k)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    let n = self.nodes[x.0].value.numel();
                    for g in acc(grads, *x, n) {
                        *g += gy[0];
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                if needs(*x) {
                    let (r, c) = self.dims2(*x, "sum_axis")?;
                    let gx = acc(grads, *x, r * c);
                    for row in 0..r {
                        for col in 0..c {
                            gx[row * c + col] += if *axis == 0 { gy[col] } else { gy[row] };
                        }
                    }
                }
            }
            Op::SegmentMean { x, segs } => {
                if needs(*x) {
                    let (c, t) = self.dims2(*x, "segment_mean")?;
                    let n = segs.len();
                    let gx = acc(grads, *x, c * t);
                    for ch in 0..c {
                        for (j, (off, len)) in segs.iter().enumerate() {
                            let g = gy[ch * n + j] / len as f64;
                            for v in &mut gx[ch * t + off..ch * t + off + len] {
                                *v += g;
                            }
                        }
                    }
                }
            }
            Op::SegmentExpand { x, segs } => {
                if needs(*x) {
                    let (c, n) = self.dims2(*x, "segment_expand")?;
                    let t = segs.total();
                    let gx = acc(grads, *x, c * n);
                    for ch in 0..c {
                        for (j, (off, len)) in segs.iter().enumerate() {
                            gx[ch * n + j] +=
                                gy[ch * t + off..ch * t + off + len].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                w,
                dilation,
                segs,
            } => {
                let (c_in, t) = self.dims2(*x, "conv1d")?;
                let ws = self.shape(*w);
                let geom = kernels::ConvGeom {
                    c_in,
                    c_out: ws[0],
                    k: ws[2],
                    dilation: *dilation,
                    frames: t,
                };
                if needs(*x) {
                    let gx = acc(grads, *x, c_in * t);
                    kernels::conv1d_backward_input(&geom, segs, gy, val(*w), gx);
                }
                if needs(*w) {
                    let n = self.nodes[w.0].value.numel();
                    let gw = acc(grads, *w, n);
                    kernels::conv1d_backward_weight(&geom, segs, gy, val(*x), gw);
                }
            }
            Op::ConcatRows(xs) => {
                let mut offset = 0;
                for x in xs {
                    let n = self.nodes[x.0].value.numel();
                    if needs(*x) {
                        add_into(acc(grads, *x, n), &gy[offset..offset + n]);
                    }
                    offset += n;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(*x) {
                    let (r, c) = self.dims2(*x, "slice_rows")?;
                    let gx = acc(grads, *x, r * c);
                    add_into(&mut gx[start * c..start * c + gy.len()], gy);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (c, n) = self.dims2(*x, "batch_norm")?;
                let g = val(*gamma);
                let mut sum_gy = vec![0.0; c];
                let mut sum_gy_xhat = vec![0.0; c];
                for ch in 0..c {
                    for j in 0..n {
                        let i = ch * n + j;
                        sum_gy[ch] += gy[i];
                        sum_gy_xhat[ch] += gy[i] * xhat[i];
                    }
                }
                if needs(*gamma) {
                    add_into(acc(grads, *gamma, c), &sum_gy_xhat);
                }
                if needs(*beta) {
                    add_into(acc(grads, *beta, c), &sum_gy);
                }
                if needs(*x) {
                    let gx = acc(grads, *x, c * n);
                    let nf = n as f64;
                    for ch in 0..c {
                        let k = g[ch] * inv_std[ch] / nf;
                        for j in 0..n {
                            let i = ch * n + j;
                            gx[i] += k * (nf * gy[i] - sum_gy[ch] - xhat[i] * sum_gy_xhat[ch]);
                        }
                    }
                }
            }
            Op::AngularMargin {
                cos,
                labels,
                margin,
            } => {
                if needs(*cos) {
                    let cv = val(*cos);
                    let (_, n) = self.dims2(*cos, "angular_margin")?;
                    let gc = acc(grads, *cos, cv.len());
                    for i in 0..gy.len() {
                        let c = cv[i];
                        if c.abs() > COS_LIMIT {
                            continue;
                        }
                        let (row, col) = (i / n, i % n);
                        let d = if labels[row] == col {
                            let theta = c.acos();
                            (theta + margin).sin() / theta.sin()
                        } else {
                            1.0
                        };
                        gc[i] += gy[i] * d;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if needs(*logits) {
                    let (b, n) = self.dims2(*logits, "cross_entropy")?;
                    let gl = acc(grads, *logits, b * n);
                    let scale = gy[0] / b as f64;
                    for row in 0..b {
                        for k in 0..n {
                            let onehot = if labels[row] == k { 1.0 } else { 0.0 };
                            gl[row * n + k] += scale * (probs[row * n + k] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

const COS_LIMIT: f64 = 1.0 - 1e-7;

#[inline]
fn guard(d: f64) -> f64 {
    if d >= 0.0 {
        d + EPS
    } else {
        d - EPS
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape(format!(
            "axis {axis} out of range for {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn check_frames(op: &'static str, frames: usize, segs: &Segments) -> Result<()> {
    if segs.total() != frames {
        return Err(Error::Shape(format!(
            "{op}: segments cover {} frames but the input has {frames}",
            segs.total()
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Shape(format!(
            "{} labels for {rows} rows",
            labels.len()
        )));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label, classes });
    }
    Ok(())
}
