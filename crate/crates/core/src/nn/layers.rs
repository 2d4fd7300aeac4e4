//! Backbone layers: TDNN, batch norm, dense, and the densely connected
//! D-TDNN layer with its transition.

use crate::autodiff::{BatchStats, Segments, Var};
use crate::dynamic::{DkConv, MultiScaleDk};
use crate::error::{Error, Result};
use crate::nn::ctx::{BnUpdate, Ctx, Mode};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPS: f64 = 1e-5;

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Which statistics batch norm normalizes with while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnStats {
    /// Statistics of the current batch.
    Batch,
    /// The running estimates, which are still updated from each batch.
    /// Used where a batch holds only a handful of columns (one per
    /// utterance), so batch statistics would leak the batch composition.
    Running,
}

/// Per-channel batch normalization over the time (column) axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
    pub eps: f64,
    pub train_stats: BnStats,
}

impl BatchNorm {
    pub fn new(init: &mut Init, layer: &str, prefix: &str, channels: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: init.constant(layer, &join(prefix, "gamma"), &[channels], 1.0)?,
            beta: init.constant(layer, &join(prefix, "beta"), &[channels], 0.0)?,
            running_mean: init.buffer(layer, &join(prefix, "running_mean"), &[channels], 0.0)?,
            running_var: init.buffer(layer, &join(prefix, "running_var"), &[channels], 1.0)?,
            channels,
            eps: BN_EPS,
            train_stats: BnStats::Batch,
        })
    }

    pub fn with_train_stats(mut self, stats: BnStats) -> Self {
        self.train_stats = stats;
        self
    }

    pub fn param_count(&self) -> usize {
        2 * self.channels
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        match (cx.mode, self.train_stats) {
            (Mode::Train, BnStats::Batch) => {
                let (y, stats) = cx.graph.batch_norm(x, gamma, beta, self.eps)?;
                cx.record_bn(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                Ok(y)
            }
            (Mode::Train, BnStats::Running) => {
                let stats = column_stats(cx.graph.value(x))?;
                cx.record_bn(BnUpdate {
                    running_mean: self.running_mean,
                    running_var: self.running_var,
                    stats,
                });
                self.running_affine(cx, x, gamma, beta)
            }
            (Mode::Infer, _) => self.running_affine(cx, x, gamma, beta),
        }
    }

    /// `gamma · (x − μ_run) / sqrt(var_run + ε) + beta`.
    fn running_affine(&self, cx: &mut Ctx, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let mean = cx.param(self.running_mean);
        let var = cx.graph.value(cx.param(self.running_var));
        let inv_std = Tensor::vector(
            var.data()
                .iter()
                .map(|v| 1.0 / (v + self.eps).sqrt())
                .collect(),
        );
        let inv_std = cx.graph.constant(inv_std);
        let g = &mut *cx.graph;
        let scale = g.mul(gamma, inv_std)?;
        let centered = g.sub(x, mean)?;
        let scaled = g.mul(centered, scale)?;
        g.add(scaled, beta)
    }
}

/// Per-row mean and biased variance of a `[C × N]` tensor.
fn column_stats(t: &Tensor) -> Result<BatchStats> {
    let (c, n) = t.dims2()?;
    let mut mean = Vec::with_capacity(c);
    let mut var = Vec::with_capacity(c);
    for ch in 0..c {
        let row = t.row(ch);
        let mu = row.iter().sum::<f64>() / n as f64;
        mean.push(mu);
        var.push(row.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n as f64);
    }
    Ok(BatchStats { mean, var })
}

/// Folds one batch's statistics into the running estimates.
pub fn apply_bn_update(store: &mut ParamStore, update: &BnUpdate, momentum: f64) {
    for (id, batch) in [
        (update.running_mean, &update.stats.mean),
        (update.running_var, &update.stats.var),
    ] {
        for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

/// Frame-wise affine map `y = Wᵀx + b`, optionally followed by ReLU.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
    pub relu: bool,
}

impl DenseLayer {
    pub fn new(
        init: &mut Init,
        layer: &str,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        relu: bool,
    ) -> Result<Self> {
        Ok(DenseLayer {
            weight: init.uniform(layer, &join(prefix, "weight"), &[in_dim, out_dim], in_dim)?,
            bias: init.constant(layer, &join(prefix, "bias"), &[out_dim], 0.0)?,
            in_dim,
            out_dim,
            relu,
        })
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }

    /// `x` is `[in × N]`; returns `[out × N]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        let g = &mut *cx.graph;
        let wt = g.transpose(w)?;
        let y = g.matmul(wt, x)?;
        let y = g.add(y, b)?;
        if self.relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }
}

/// Plain dilated convolution with bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
}

impl Conv {
    pub fn new(
        init: &mut Init,
        layer: &str,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel size must be odd, got {kernel}"
            )));
        }
        if dilation == 0 {
            return Err(Error::Config("dilation must be at least 1".into()));
        }
        Ok(Conv {
            weight: init.uniform(
                layer,
                &join(prefix, "weight"),
                &[c_out, c_in, kernel],
                c_in * kernel,
            )?,
            bias: init.constant(layer, &join(prefix, "bias"), &[c_out], 0.0)?,
            c_in,
            c_out,
            kernel,
            dilation,
        })
    }

    pub fn param_count(&self) -> usize {
        self.c_out * self.c_in * self.kernel + self.c_out
    }

    /// Frames on either side of the centre that the kernel reads.
    pub fn context(&self) -> usize {
        (self.kernel - 1) / 2 * self.dilation
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<Var> {
        let w = cx.param(self.weight);
        let b = cx.param(self.bias);
        let y = cx.graph.conv1d_segments(x, w, self.dilation, segs)?;
        cx.graph.add(y, b)
    }
}

/// conv → BN → ReLU.
#[derive(Clone, Debug)]
pub struct TdnnLayer {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl TdnnLayer {
    pub fn new(
        init: &mut Init,
        layer: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
    ) -> Result<Self> {
        Ok(TdnnLayer {
            conv: Conv::new(init, layer, "conv", c_in, c_out, kernel, dilation)?,
            bn: BatchNorm::new(init, layer, "bn", c_out)?,
        })
    }

    pub fn context(&self) -> usize {
        self.conv.context()
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.bn.param_count()
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<Var> {
        let y = self.conv.forward(cx, x, segs)?;
        let y = self.bn.forward(cx, y)?;
        cx.graph.relu(y)
    }
}

/// The temporal operator inside a D-TDNN layer.
#[derive(Clone, Debug)]
pub enum Temporal {
    Conv(Conv),
    Dynamic(DkConv),
    MultiScale(MultiScaleDk),
}

impl Temporal {
    pub fn param_count(&self) -> usize {
        match self {
            Temporal::Conv(c) => c.param_count(),
            Temporal::Dynamic(d) => d.param_count(),
            Temporal::MultiScale(m) => m.param_count(),
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            Temporal::Conv(c) => c.c_out,
            Temporal::Dynamic(d) => d.c_out,
            Temporal::MultiScale(m) => m.width,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<Var> {
        match self {
            Temporal::Conv(c) => c.forward(cx, x, segs),
            Temporal::Dynamic(d) => d.forward(cx, x, segs),
            Temporal::MultiScale(m) => m.forward(cx, x, segs),
        }
    }
}

/// Densely connected TDNN layer:
/// BN → ReLU → bottleneck dense → BN → ReLU → temporal op, with the new
/// channels appended to the input.
#[derive(Clone, Debug)]
pub struct DtdnnLayer {
    pub pre_bn: BatchNorm,
    pub bottleneck: DenseLayer,
    pub mid_bn: BatchNorm,
    pub temporal: Temporal,
    pub in_dim: usize,
}

impl DtdnnLayer {
    /// Builds the layer around a temporal op constructed by `temporal` from
    /// the bottleneck width.
    pub fn new(
        init: &mut Init,
        layer: &str,
        in_dim: usize,
        bottleneck: usize,
        temporal: impl FnOnce(&mut Init, &str, usize) -> Result<Temporal>,
    ) -> Result<Self> {
        let pre_bn = BatchNorm::new(init, layer, "pre_bn", in_dim)?;
        let dense = DenseLayer::new(init, layer, "bottleneck", in_dim, bottleneck, false)?;
        let mid_bn = BatchNorm::new(init, layer, "mid_bn", bottleneck)?;
        let temporal = temporal(init, layer, bottleneck)?;
        Ok(DtdnnLayer {
            pre_bn,
            bottleneck: dense,
            mid_bn,
            temporal,
            in_dim,
        })
    }

    pub fn growth(&self) -> usize {
        self.temporal.out_channels()
    }

    pub fn out_dim(&self) -> usize {
        self.in_dim + self.growth()
    }

    pub fn param_count(&self) -> usize {
        self.pre_bn.param_count()
            + self.bottleneck.param_count()
            + self.mid_bn.param_count()
            + self.temporal.param_count()
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<Var> {
        let c = cx.graph.shape(x)[0];
        if c != self.in_dim {
            return Err(Error::Config(format!(
                "D-TDNN layer expects {} input channels, got {c}",
                self.in_dim
            )));
        }
        let h = self.pre_bn.forward(cx, x)?;
        let h = cx.graph.relu(h)?;
        let h = self.bottleneck.forward(cx, h)?;
        let h = self.mid_bn.forward(cx, h)?;
        let h = cx.graph.relu(h)?;
        let new = self.temporal.forward(cx, h, segs)?;
        cx.graph.concat_rows(&[x, new])
    }
}

/// BN → ReLU → dense, shrinking the channel count between dense blocks.
#[derive(Clone, Debug)]
pub struct TransitionLayer {
    pub bn: BatchNorm,
    pub dense: DenseLayer,
}

impl TransitionLayer {
    pub fn new(init: &mut Init, layer: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(TransitionLayer {
            bn: BatchNorm::new(init, layer, "bn", in_dim)?,
            dense: DenseLayer::new(init, layer, "dense", in_dim, out_dim, false)?,
        })
    }

    pub fn param_count(&self) -> usize {
        self.bn.param_count() + self.dense.param_count()
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.bn.forward(cx, x)?;
        let h = cx.graph.relu(h)?;
        self.dense.forward(cx, h)
    }
}
