//! Dynamic kernel convolution, local multi-scale learning and global
//! multi-scale pooling.
//!
//! Everything here operates on packed batches (`[C × ΣT]` plus
//! [`Segments`]); statistics and attention weights are computed per segment,
//! so a batch behaves like independent utterances.

use crate::autodiff::{Graph, Segments, Var};
use crate::error::{Error, Result};
use crate::nn::layers::{join, Conv};
use crate::nn::{Ctx, Init, ParamId};

/// Number of parallel branches in a dynamic kernel convolution.
pub const BRANCHES: usize = 2;

/// Per-channel high-order statistics over time, each `[C × segments]`.
#[derive(Clone, Copy, Debug)]
pub struct HospStats {
    pub mu: Var,
    pub sigma: Var,
    pub skew: Var,
    pub kurt: Var,
}

/// Mean, standard deviation, skewness and excess kurtosis of every channel.
///
/// Moments are population (biased) moments: `σ = sqrt(m2 + ε)`,
/// `skew = m3 / σ³`, `kurt = m4 / σ⁴ − 3`, with the graph's ε guards. A
/// constant channel therefore yields `σ = 1e-4`, `skew = 0`, `kurt = −3`.
pub fn hosp(g: &mut Graph, x: Var, segs: &Segments) -> Result<HospStats> {
    let mu = g.segment_mean(x, segs)?;
    let mu_t = g.segment_expand(mu, segs)?;
    let d = g.sub(x, mu_t)?;
    let d2 = g.pow(d, 2.0)?;
    let d3 = g.pow(d, 3.0)?;
    let d4 = g.pow(d, 4.0)?;
    let m2 = g.segment_mean(d2, segs)?;
    let m3 = g.segment_mean(d3, segs)?;
    let m4 = g.segment_mean(d4, segs)?;
    let sigma = g.sqrt(m2)?;
    let s3 = g.pow(sigma, 3.0)?;
    let s4 = g.pow(sigma, 4.0)?;
    let skew = g.div(m3, s3)?;
    let kurt = g.div(m4, s4)?;
    let kurt = g.affine(kurt, 1.0, -3.0)?;
    Ok(HospStats {
        mu,
        sigma,
        skew,
        kurt,
    })
}

/// Two-branch convolution (dilation 1 and 2, same kernel size, separate
/// weights) fused by per-channel softmax attention computed from the HOSP
/// statistics of the branch sum.
#[derive(Clone, Debug)]
pub struct DkConv {
    pub branches: [Conv; BRANCHES],
    /// Shared squeeze `[4C × C/r]` and its bias `[C/r]`.
    pub squeeze: ParamId,
    pub squeeze_bias: ParamId,
    /// Per-branch excitation `[C/r × C]` and bias `[C]`.
    pub excite: [ParamId; BRANCHES],
    pub excite_bias: [ParamId; BRANCHES],
    pub c_in: usize,
    pub c_out: usize,
    pub reduction: usize,
}

/// Intermediate values of a [`DkConv`] forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DkTrace {
    pub branch: [Var; BRANCHES],
    pub sum: Var,
    pub stats: HospStats,
    /// Softmax weights per branch, `[C × segments]`.
    pub weights: [Var; BRANCHES],
    pub out: Var,
}

impl DkConv {
    pub fn new(
        init: &mut Init,
        layer: &str,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        reduction: usize,
    ) -> Result<Self> {
        if reduction == 0 || !c_out.is_multiple_of(reduction) {
            return Err(Error::Config(format!(
                "dynamic kernel conv: {c_out} output channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = c_out / reduction;
        let b1 = Conv::new(
            init,
            layer,
            &join(prefix, "branch1"),
            c_in,
            c_out,
            kernel,
            1,
        )?;
        let b2 = Conv::new(
            init,
            layer,
            &join(prefix, "branch2"),
            c_in,
            c_out,
            kernel,
            2,
        )?;
        let squeeze = init.uniform(
            layer,
            &join(prefix, "squeeze.weight"),
            &[4 * c_out, hidden],
            4 * c_out,
        )?;
        let squeeze_bias = init.constant(layer, &join(prefix, "squeeze.bias"), &[hidden], 0.0)?;
        let mut excite = [squeeze; BRANCHES];
        let mut excite_bias = [squeeze; BRANCHES];
        for i in 0..BRANCHES {
            excite[i] = init.uniform(
                layer,
                &join(prefix, &format!("excite{}.weight", i + 1)),
                &[hidden, c_out],
                hidden,
            )?;
            excite_bias[i] = init.constant(
                layer,
                &join(prefix, &format!("excite{}.bias", i + 1)),
                &[c_out],
                0.0,
            )?;
        }
        Ok(DkConv {
            branches: [b1, b2],
            squeeze,
            squeeze_bias,
            excite,
            excite_bias,
            c_in,
            c_out,
            reduction,
        })
    }

    pub fn hidden(&self) -> usize {
        self.c_out / self.reduction
    }

    pub fn param_count(&self) -> usize {
        let h = self.hidden();
        let c = self.c_out;
        self.branches.iter().map(Conv::param_count).sum::<usize>()
            + 4 * c * h
            + h
            + BRANCHES * (h * c + c)
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<Var> {
        Ok(self.trace(cx, x, segs)?.out)
    }

    /// Forward pass exposing the branch outputs and attention weights.
    pub fn trace(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<DkTrace> {
        let h1 = self.branches[0].forward(cx, x, segs)?;
        let h2 = self.branches[1].forward(cx, x, segs)?;
        let squeeze = cx.param(self.squeeze);
        let squeeze_bias = cx.param(self.squeeze_bias);
        let excite = self.excite.map(|p| cx.param(p));
        let excite_bias = self.excite_bias.map(|p| cx.param(p));
        let g = &mut *cx.graph;

        let sum = g.add(h1, h2)?;
        let stats = hosp(g, sum, segs)?;
        let pooled = g.concat_rows(&[stats.mu, stats.sigma, stats.skew, stats.kurt])?;
        let vt = g.transpose(squeeze)?;
        let z = g.matmul(vt, pooled)?;
        let z = g.add(z, squeeze_bias)?;
        let mut logits = Vec::with_capacity(BRANCHES);
        for i in 0..BRANCHES {
            let wt = g.transpose(excite[i])?;
            let a = g.matmul(wt, z)?;
            logits.push(g.add(a, excite_bias[i])?);
        }
        let n = segs.len();
        let c = self.c_out;
        let stacked = g.concat_rows(&logits)?;
        let stacked = g.reshape(stacked, &[BRANCHES, c, n])?;
        let soft = g.softmax(stacked, 0)?;
        let soft = g.reshape(soft, &[BRANCHES * c, n])?;
        let s1 = g.slice_rows(soft, 0, c)?;
        let s2 = g.slice_rows(soft, c, c)?;

        // s1·h1 + s2·h2 written as h2 + s1·(h1 − h2), which is the same
        // value when s1 + s2 = 1 and reproduces h exactly when h1 = h2.
        let s1_t = g.segment_expand(s1, segs)?;
        let diff = g.sub(h1, h2)?;
        let weighted = g.mul(s1_t, diff)?;
        let out = g.add(h2, weighted)?;
        Ok(DkTrace {
            branch: [h1, h2],
            sum,
            stats,
            weights: [s1, s2],
            out,
        })
    }
}

/// Hierarchical split of the channels into `scales` groups:
/// `Out₁ = X₁`, `Out₂ = F(X₂)`, `Out_i = F(Out_{i−1} + X_i)`, concatenated.
///
/// `f(cx, i, input)` applies the operator of group `i` (`1 ≤ i < scales`).
pub fn multiscale_with<F>(cx: &mut Ctx, x: Var, scales: usize, mut f: F) -> Result<Var>
where
    F: FnMut(&mut Ctx, usize, Var) -> Result<Var>,
{
    let c = cx.graph.shape(x)[0];
    if scales == 0 || !c.is_multiple_of(scales) {
        return Err(Error::Config(format!(
            "multi-scale block: {c} channels not divisible into {scales} groups"
        )));
    }
    let width = c / scales;
    let mut outs = Vec::with_capacity(scales);
    outs.push(cx.graph.slice_rows(x, 0, width)?);
    for i in 1..scales {
        let xi = cx.graph.slice_rows(x, i * width, width)?;
        let input = if i == 1 {
            xi
        } else {
            cx.graph.add(outs[i - 1], xi)?
        };
        outs.push(f(cx, i, input)?);
    }
    if scales == 1 {
        return Ok(outs[0]);
    }
    cx.graph.concat_rows(&outs)
}

/// Local multi-scale block whose group operator is a [`DkConv`] on
/// `width / scales` channels.
#[derive(Clone, Debug)]
pub struct MultiScaleDk {
    pub scales: usize,
    pub width: usize,
    /// One operator per group after the first.
    pub groups: Vec<DkConv>,
}

impl MultiScaleDk {
    pub fn new(
        init: &mut Init,
        layer: &str,
        prefix: &str,
        width: usize,
        scales: usize,
        kernel: usize,
        reduction: usize,
    ) -> Result<Self> {
        if scales == 0 || !width.is_multiple_of(scales) {
            return Err(Error::Config(format!(
                "multi-scale block: {width} channels not divisible into {scales} groups"
            )));
        }
        let group = width / scales;
        let groups = (1..scales)
            .map(|i| {
                DkConv::new(
                    init,
                    layer,
                    &join(prefix, &format!("group{}", i + 1)),
                    group,
                    group,
                    kernel,
                    reduction,
                )
            })
            .collect::<Result<_>>()?;
        Ok(MultiScaleDk {
            scales,
            width,
            groups,
        })
    }

    pub fn param_count(&self) -> usize {
        self.groups.iter().map(DkConv::param_count).sum()
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, segs: &Segments) -> Result<Var> {
        let c = cx.graph.shape(x)[0];
        if c != self.width {
            return Err(Error::Config(format!(
                "multi-scale block expects {} channels, got {c}",
                self.width
            )));
        }
        multiscale_with(cx, x, self.scales, |cx, i, input| {
            self.groups[i - 1].forward(cx, input, segs)
        })
    }
}

/// Concatenates the taps on the channel axis and returns `[μ; σ]` per
/// segment, `[2·ΣC_i × segments]`, with `σ = sqrt(E[h⊙h] − μ⊙μ + ε)`.
pub fn global_multiscale_pool(g: &mut Graph, taps: &[Var], segs: &Segments) -> Result<Var> {
    let Some(&first) = taps.first() else {
        return Err(Error::Shape("global pooling needs at least one tap".into()));
    };
    let frames = g.shape(first).get(1).copied().unwrap_or(1);
    for &t in taps {
        let tf = g.shape(t).get(1).copied().unwrap_or(1);
        if tf != frames {
            return Err(Error::Dimension {
                op: "global_multiscale_pool",
                lhs: g.shape(first).to_vec(),
                rhs: g.shape(t).to_vec(),
            });
        }
    }
    let h = if taps.len() == 1 {
        first
    } else {
        g.concat_rows(taps)?
    };
    let mu = g.segment_mean(h, segs)?;
    let sq = g.mul(h, h)?;
    let second = g.segment_mean(sq, segs)?;
    let mu2 = g.mul(mu, mu)?;
    let var = g.sub(second, mu2)?;
    let sigma = g.sqrt(var)?;
    g.concat_rows(&[mu, sigma])
}
