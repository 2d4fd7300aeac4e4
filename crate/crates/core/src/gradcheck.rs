//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side only ever calls the forward pass, so it stays independent
//! of the backward rules it is checking.

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Segments, Var};
use crate::error::Result;
use crate::model::Model;
use crate::nn::{Ctx, Mode, ParamKind};
use crate::rng;
use crate::tensor::Tensor;
use crate::training::{AamHead, Batch};

/// One named tensor fed to the objective.
#[derive(Clone, Debug)]
pub struct GradInput {
    pub name: String,
    pub tensor: Tensor,
    /// Constant inputs (e.g. batch-norm running statistics) are bound without
    /// gradients and never perturbed.
    pub differentiable: bool,
}

impl GradInput {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        GradInput {
            name: name.into(),
            tensor,
            differentiable: true,
        }
    }

    pub fn constant(name: impl Into<String>, tensor: Tensor) -> Self {
        GradInput {
            name: name.into(),
            tensor,
            differentiable: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that are zero
    /// up to round-off compare in absolute terms.
    pub floor: f64,
    /// Entries checked per input; larger tensors are probed at evenly spaced
    /// indices.
    pub max_entries: usize,
    /// Negative control: scale the analytic gradient of the named input.
    pub corrupt: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_entries: usize::MAX,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    /// Entries whose perturbation crossed a ReLU or clamp boundary even at a
    /// reduced step; those are not differentiable there and are skipped.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub groups: Vec<GroupReport>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupReport> {
        self.groups.iter().filter(|g| !g.passed)
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Eval {
    loss: f64,
    signature: u64,
}

fn evaluate<F>(inputs: &[GradInput], objective: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| {
            if i.differentiable {
                g.param(i.tensor.clone())
            } else {
                g.constant(i.tensor.clone())
            }
        })
        .collect();
    let loss = objective(&mut g, &vars)?;
    Ok((g, vars, loss))
}

fn loss_only<F>(inputs: &[GradInput], objective: &F) -> Result<Eval>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, loss) = evaluate(inputs, objective)?;
    Ok(Eval {
        loss: g.value(loss).data()[0],
        signature: g.kink_signature(),
    })
}

/// Compares analytic gradients of `objective` against central differences
/// for every differentiable input.
pub fn check_gradients<F>(
    inputs: &[GradInput],
    options: &GradCheckOptions,
    objective: F,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (mut g, vars, loss) = evaluate(inputs, &objective)?;
    let base_signature = g.kink_signature();
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(input, &v)| {
            let mut grad = g
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; input.tensor.numel()]);
            if options.corrupt.as_deref() == Some(input.name.as_str()) {
                for x in &mut grad {
                    *x = *x * 1.5 + 1e-2;
                }
            }
            grad
        })
        .collect();
    drop(g);

    let mut work = inputs.to_vec();
    let mut groups = Vec::new();
    for (slot, input) in inputs.iter().enumerate() {
        if !input.differentiable {
            continue;
        }
        let numel = input.tensor.numel();
        let count = numel.min(options.max_entries.max(1));
        let mut report = GroupReport {
            name: input.name.clone(),
            checked: 0,
            kinks: 0,
            max_rel_err: 0.0,
            worst_index: 0,
            passed: true,
        };
        for j in 0..count {
            let idx = if count == numel { j } else { j * numel / count };
            let original = input.tensor.data()[idx];
            let mut numeric = None;
            for step in [options.step, options.step * 1e-2] {
                work[slot].tensor.data_mut()[idx] = original + step;
                let plus = loss_only(&work, &objective)?;
                work[slot].tensor.data_mut()[idx] = original - step;
                let minus = loss_only(&work, &objective)?;
                work[slot].tensor.data_mut()[idx] = original;
                if plus.signature == base_signature && minus.signature == base_signature {
                    numeric = Some((plus.loss - minus.loss) / (2.0 * step));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.kinks += 1;
                continue;
            };
            report.checked += 1;
            let err = rel_err(analytic[slot][idx], numeric, options.floor);
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst_index = idx;
            }
        }
        report.passed = report.max_rel_err < options.tolerance && report.checked > 0;
        groups.push(report);
    }
    Ok(GradReport { groups })
}

/// Random packed batch with one segment per entry of `lens`, labelled
/// `0, 1, 2, …` modulo `classes`.
pub fn random_batch(channels: usize, lens: &[usize], classes: usize, seed: u64) -> Result<Batch> {
    let mut r = rng::stream(seed, "gradcheck-batch", 0);
    let total: usize = lens.iter().sum();
    let data = (0..channels * total)
        .map(|_| StandardNormal.sample(&mut r))
        .collect();
    Ok(Batch {
        features: Tensor::new(vec![channels, total], data)?,
        segments: Segments::new(lens)?,
        labels: (0..lens.len()).map(|i| i % classes).collect(),
    })
}

/// Checks every trainable tensor of `model` under the AAM loss on `batch`
/// in training mode; one report group per parameter tensor.
pub fn check_model(model: &Model, batch: &Batch, options: &GradCheckOptions) -> Result<GradReport> {
    let entries = model.params.entries();
    let mut inputs: Vec<GradInput> = entries
        .iter()
        .map(|e| match e.kind {
            ParamKind::Trainable => GradInput::new(e.name.clone(), e.tensor.clone()),
            ParamKind::Buffer => GradInput::constant(e.name.clone(), e.tensor.clone()),
        })
        .collect();
    inputs.push(GradInput::constant("input", batch.features.clone()));
    let head = AamHead {
        margin: model.config.aam_margin,
        scale: model.config.aam_scale,
    };
    let n = entries.len();
    check_gradients(&inputs, options, |g, vars| {
        let mut cx = Ctx::new(g, vars[..n].to_vec(), Mode::Train);
        let out = model.forward(&mut cx, vars[n], &batch.segments)?;
        head.loss(cx.graph, out.cosine, &batch.labels)
    })
}
