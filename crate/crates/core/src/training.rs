//! AAM-softmax loss, SGD with L2 decay, the plateau learning-rate schedule,
//! the per-language segment sampler and the training loop.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Segments, Var};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::model::{Model, TrainState};
use crate::nn::{apply_bn_update, Mode, ParamStore, BN_MOMENTUM};
use crate::rng;
use crate::tensor::Tensor;

/// Additive angular margin softmax on cosine logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AamHead {
    /// Added to the target angle, in radians.
    pub margin: f64,
    pub scale: f64,
}

impl AamHead {
    /// Mean cross-entropy of `scale · cos(θ_y + m)` against
    /// `scale · cos θ_j` over the rows of `cosine: [B × classes]`.
    pub fn loss(&self, g: &mut Graph, cosine: Var, labels: &[usize]) -> Result<Var> {
        let margined = g.angular_margin(cosine, labels, self.margin)?;
        let logits = g.scale(margined, self.scale)?;
        g.cross_entropy(logits, labels)
    }
}

/// Plain SGD with L2 decay: `p ← p − lr·(g + l2·p)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub l2: f64,
}

impl Sgd {
    pub fn update(&self, param: &mut [f64], grad: &[f64]) {
        for (p, g) in param.iter_mut().zip(grad) {
            *p -= self.lr * (g + self.l2 * *p);
        }
    }

    /// Updates every trainable entry of `store` from the gradients of its
    /// bound variable. Nothing is modified if any gradient is non-finite.
    pub fn step(&self, store: &mut ParamStore, graph: &Graph, vars: &[Var]) -> Result<()> {
        let mut grads = Vec::new();
        for (id, entry) in store.trainable() {
            let grad = graph.grad(vars[id.index()]);
            if let Some(gr) = grad {
                if gr.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteGradient(entry.name.clone()));
                }
            }
            grads.push((id, grad));
        }
        for (id, grad) in grads {
            if let Some(grad) = grad {
                self.update(store.get_mut(id).data_mut(), grad);
            } else {
                let zeros = vec![0.0; store.get(id).numel()];
                self.update(store.get_mut(id).data_mut(), &zeros);
            }
        }
        Ok(())
    }
}

/// Halves (by `decay`) the learning rate whenever the smoothed loss has not
/// improved for `plateau_steps` steps.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub decay: f64,
    pub plateau_steps: u64,
    /// Weight of the previous value in the loss moving average.
    pub smoothing: f64,
    pub state: TrainState,
}

impl PlateauSchedule {
    pub fn new(config: &TrainConfig) -> Self {
        PlateauSchedule {
            decay: config.lr_decay,
            plateau_steps: config.plateau_steps,
            smoothing: config.loss_smoothing,
            state: TrainState {
                step: 0,
                lr: config.lr,
                loss_ema: f64::NAN,
                best_loss: f64::INFINITY,
                steps_since_best: 0,
            },
        }
    }

    pub fn lr(&self) -> f64 {
        self.state.lr
    }

    /// Records the loss of the step just taken and advances the schedule.
    pub fn observe(&mut self, loss: f64) {
        let s = &mut self.state;
        s.step += 1;
        s.loss_ema = if s.loss_ema.is_nan() {
            loss
        } else {
            self.smoothing * s.loss_ema + (1.0 - self.smoothing) * loss
        };
        if s.loss_ema < s.best_loss {
            s.best_loss = s.loss_ema;
            s.steps_since_best = 0;
        } else {
            s.steps_since_best += 1;
            if s.steps_since_best >= self.plateau_steps {
                s.lr *= self.decay;
                s.steps_since_best = 0;
            }
        }
    }
}

/// One segment per sampled language, lengths uniform in a frame range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchSpec {
    pub languages_per_batch: usize,
    pub min_frames: usize,
    pub max_frames: usize,
}

/// Packed training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[channels × ΣT]`.
    pub features: Tensor,
    pub segments: Segments,
    pub labels: Vec<usize>,
}

/// Utterances grouped by label.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub utterances: Vec<FeatureSequence>,
    /// `by_language[l]` lists indices into `utterances`.
    pub by_language: Vec<Vec<usize>>,
    pub channels: usize,
}

impl Dataset {
    pub fn new(utterances: Vec<FeatureSequence>, num_classes: usize) -> Result<Self> {
        let Some(first) = utterances.first() else {
            return Err(Error::Sampling("dataset is empty".into()));
        };
        let channels = first.channels();
        let mut by_language = vec![Vec::new(); num_classes];
        for (i, u) in utterances.iter().enumerate() {
            if u.label >= num_classes {
                return Err(Error::Label {
                    label: u.label,
                    classes: num_classes,
                });
            }
            if u.channels() != channels {
                return Err(Error::Dimension {
                    op: "dataset",
                    lhs: vec![channels],
                    rhs: u.features.shape().to_vec(),
                });
            }
            by_language[u.label].push(i);
        }
        Ok(Dataset {
            utterances,
            by_language,
            channels,
        })
    }

    /// Labels with at least one utterance.
    pub fn languages(&self) -> Vec<usize> {
        (0..self.by_language.len())
            .filter(|&l| !self.by_language[l].is_empty())
            .collect()
    }
}

/// Draws languages without replacement, one random utterance each, and a
/// random window of uniform length; shorter utterances are looped.
pub fn sample_batch(data: &Dataset, spec: &BatchSpec, rng: &mut rng::Rng) -> Result<Batch> {
    if spec.min_frames == 0 || spec.min_frames > spec.max_frames {
        return Err(Error::Sampling(format!(
            "bad segment length range {}..={}",
            spec.min_frames, spec.max_frames
        )));
    }
    let langs = data.languages();
    if langs.is_empty() {
        return Err(Error::Sampling("no language has any utterance".into()));
    }
    let k = spec.languages_per_batch.min(langs.len());
    if k == 0 {
        return Err(Error::Sampling(
            "languages_per_batch must be positive".into(),
        ));
    }
    let picked = sample(rng, langs.len(), k);
    let c = data.channels;
    let mut lens = Vec::with_capacity(k);
    let mut labels = Vec::with_capacity(k);
    let mut pieces: Vec<(usize, usize, usize)> = Vec::with_capacity(k);
    for i in picked.iter() {
        let lang = langs[i];
        let pool = &data.by_language[lang];
        let utt = pool[rng.random_range(0..pool.len())];
        let len = rng.random_range(spec.min_frames..=spec.max_frames);
        let frames = data.utterances[utt].frames();
        let start = if frames > len {
            rng.random_range(0..=frames - len)
        } else {
            0
        };
        pieces.push((utt, start, len));
        lens.push(len);
        labels.push(lang);
    }
    let total: usize = lens.iter().sum();
    let mut out = vec![0.0; c * total];
    let mut col = 0;
    for &(utt, start, len) in &pieces {
        let f = &data.utterances[utt].features;
        let frames = f.shape()[1];
        for ch in 0..c {
            let row = f.row(ch);
            let dst = &mut out[ch * total + col..ch * total + col + len];
            for (j, d) in dst.iter_mut().enumerate() {
                *d = row[(start + j) % frames];
            }
        }
        col += len;
    }
    Ok(Batch {
        features: Tensor::new(vec![c, total], out)?,
        segments: Segments::new(&lens)?,
        labels,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub max_steps: u64,
    pub lr: f64,
    pub lr_floor: f64,
    pub lr_decay: f64,
    pub plateau_steps: u64,
    pub loss_smoothing: f64,
    pub l2: f64,
    pub languages_per_batch: usize,
    pub segment_len_min_frames: usize,
    pub segment_len_max_frames: usize,
    pub log_every_steps: u64,
    pub checkpoint_every_steps: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            max_steps: 20_000,
            lr: 0.01,
            lr_floor: 1e-6,
            lr_decay: 0.5,
            plateau_steps: 2_000,
            loss_smoothing: 0.99,
            l2: 1e-4,
            languages_per_batch: 16,
            segment_len_min_frames: 200,
            segment_len_max_frames: 400,
            log_every_steps: 100,
            checkpoint_every_steps: 1_000,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.lr_floor > 0.0) {
            return Err(Error::Config("lr and lr_floor must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.loss_smoothing) {
            return Err(Error::Config("loss_smoothing must lie in [0, 1)".into()));
        }
        if !(self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        if self.plateau_steps == 0 || self.languages_per_batch == 0 {
            return Err(Error::Config(
                "plateau_steps and languages_per_batch must be positive".into(),
            ));
        }
        if self.segment_len_min_frames == 0
            || self.segment_len_min_frames > self.segment_len_max_frames
        {
            return Err(Error::Config(format!(
                "bad segment length range {}..={}",
                self.segment_len_min_frames, self.segment_len_max_frames
            )));
        }
        Ok(())
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            languages_per_batch: self.languages_per_batch,
            min_frames: self.segment_len_min_frames,
            max_frames: self.segment_len_max_frames,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Reported to the caller's observer while training runs.
#[derive(Clone, Copy, Debug)]
pub enum TrainEvent<'a> {
    /// Every `log_every_steps` steps and after the last one.
    Log(LossRecord),
    /// Every `checkpoint_every_steps` steps and after the last one; the model
    /// and state are consistent with each other.
    Checkpoint(&'a Model, &'a TrainState),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxSteps,
    LrFloor,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Loss of every step run by this call.
    pub trace: Vec<LossRecord>,
    pub state: TrainState,
    pub stop: StopReason,
}

/// Runs one optimization step on `batch` and returns the loss.
pub fn train_step(model: &mut Model, batch: &Batch, head: &AamHead, sgd: &Sgd) -> Result<f64> {
    let mut graph = Graph::new();
    let (loss, vars, updates) = {
        let mut cx = model.context(&mut graph, Mode::Train);
        let x = cx.graph.constant(batch.features.clone());
        let out = model.forward(&mut cx, x, &batch.segments)?;
        let loss = head.loss(cx.graph, out.cosine, &batch.labels)?;
        let updates = cx.take_bn_updates();
        (loss, cx.vars().to_vec(), updates)
    };
    let value = graph.value(loss).data()[0];
    graph.backward(loss)?;
    sgd.step(&mut model.params, &graph, &vars)?;
    for u in &updates {
        apply_bn_update(&mut model.params, u, BN_MOMENTUM);
    }
    Ok(value)
}

/// Trains until `max_steps` or until the learning rate drops below
/// `lr_floor`. Batches are drawn from per-step seed streams, so resuming
/// from a checkpoint's state continues the exact same run.
pub fn train<F>(
    model: &mut Model,
    data: &Dataset,
    config: &TrainConfig,
    resume: Option<TrainState>,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(TrainEvent) -> Result<()>,
{
    config.validate()?;
    if data.channels != model.config.input_dim {
        return Err(Error::Dimension {
            op: "train",
            lhs: vec![model.config.input_dim],
            rhs: vec![data.channels],
        });
    }
    let head = AamHead {
        margin: model.config.aam_margin,
        scale: model.config.aam_scale,
    };
    let mut schedule = PlateauSchedule::new(config);
    if let Some(state) = resume {
        schedule.state = state;
    }
    let spec = config.batch_spec();
    let mut trace = Vec::new();
    let stop = loop {
        if schedule.state.step >= config.max_steps {
            break StopReason::MaxSteps;
        }
        if schedule.lr() < config.lr_floor {
            break StopReason::LrFloor;
        }
        let step = schedule.state.step;
        let batch = sample_batch(data, &spec, &mut rng::stream(config.seed, "batch", step))?;
        let sgd = Sgd {
            lr: schedule.lr(),
            l2: config.l2,
        };
        let loss = match train_step(model, &batch, &head, &sgd) {
            Ok(loss) if loss.is_finite() => loss,
            Ok(loss) => return Err(Error::Divergence { step, loss }),
            Err(Error::NonFinite { .. }) | Err(Error::NonFiniteGradient(_)) => {
                return Err(Error::Divergence {
                    step,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        let record = LossRecord {
            step,
            lr: sgd.lr,
            loss,
        };
        trace.push(record);
        schedule.observe(loss);
        let done = schedule.state.step >= config.max_steps || schedule.lr() < config.lr_floor;
        if config.log_every_steps > 0 && (step.is_multiple_of(config.log_every_steps) || done) {
            observer(TrainEvent::Log(record))?;
        }
        let s = schedule.state.step;
        if done
            || (config.checkpoint_every_steps > 0
                && s.is_multiple_of(config.checkpoint_every_steps))
        {
            observer(TrainEvent::Checkpoint(model, &schedule.state))?;
        }
    };
    Ok(TrainOutcome {
        trace,
        state: schedule.state,
        stop,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_hand_formula() {
        let sgd = Sgd { lr: 0.1, l2: 0.0 };
        let mut p = [1.0];
        sgd.update(&mut p, &[0.0]);
        assert_eq!(p, [1.0]);
        sgd.update(&mut p, &[1.0]);
        assert_eq!(p, [0.9]);
        let sgd = Sgd { lr: 0.1, l2: 0.5 };
        let mut p = [2.0];
        sgd.update(&mut p, &[1.0]);
        assert_eq!(p, [2.0 - 0.1 * (1.0 + 0.5 * 2.0)]);
    }

    #[test]
    fn schedule_decays_on_plateau() {
        let cfg = TrainConfig {
            plateau_steps: 3,
            ..Default::default()
        };
        let mut s = PlateauSchedule::new(&cfg);
        s.observe(1.0);
        assert_eq!(s.lr(), 0.01);
        for _ in 0..3 {
            s.observe(1.0);
        }
        assert_eq!(s.lr(), 0.005);
    }
}
