//! Optimizers, freezing, and the base and explainer training loops.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{base_predictions, masked_predictions, task_metric};
use crate::mask::MaskedModel;
use crate::nn::{Binding, Mode, ModelGraph};
use crate::objectives::{cross_entropy_loss, mse_loss, total_objective, RegularizerConfig};
use crate::tasks::{LabeledDataset, Targets};
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl OptimizerKind {
    pub fn default_lr(self) -> f64 {
        match self {
            OptimizerKind::Sgd => 1e-2,
            OptimizerKind::Adam => 1e-3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

/// Optimizer hyperparameters plus per-parameter Adam moments, keyed by
/// parameter path.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
        }
        Ok(OptimizerState { kind, lr, step: 0, moments: BTreeMap::new() })
    }

    pub fn with_default_lr(kind: OptimizerKind) -> Self {
        Self::new(kind, kind.default_lr()).expect("default learning rate is valid")
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Adam `(m, v)` for a parameter path such as `layer0.w`.
    pub fn moments(&self, path: &str) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(path).map(|(m, v)| (m, v))
    }

    /// Updates every trainable parameter from its accumulated gradient, then
    /// clears the gradients. Nothing is modified if any trainable parameter
    /// lacks a gradient.
    pub fn step(&mut self, model: &mut ModelGraph) -> Result<()> {
        for (name, p) in model.params() {
            if p.trainable && p.grad.is_none() {
                return Err(Error::State(format!("trainable parameter {name} has no gradient")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
        for (li, layer) in model.layers_mut().iter_mut().enumerate() {
            for p in layer.params.iter_mut().filter(|p| p.trainable) {
                let g = p.grad.take().expect("checked above");
                match self.kind {
                    OptimizerKind::Sgd => {
                        p.value.data_mut().iter_mut().zip(g.data()).for_each(|(w, g)| *w -= self.lr * g);
                    }
                    OptimizerKind::Adam => {
                        let (m, v) = self
                            .moments
                            .entry(format!("layer{li}.{}", p.name))
                            .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
                        let w = p.value.data_mut();
                        let (m, v) = (m.data_mut(), v.data_mut());
                        for i in 0..w.len() {
                            let gi = g.data()[i];
                            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
                            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                            let mhat = m[i] / bc1;
                            let vhat = v[i] / bc2;
                            w[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Marks every parameter frozen (not trainable) or trainable again.
pub fn freeze_parameters(model: &mut ModelGraph, frozen: bool) {
    model.set_trainable(!frozen);
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(model: &mut ModelGraph, max_norm: f64) -> f64 {
    let norm = model
        .params()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for p in model.params_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub shuffle: bool,
    pub reg: RegularizerConfig,
    /// Training-set metric is computed every this many epochs and after the
    /// last one.
    pub eval_every: usize,
    pub optimizer: OptimizerKind,
    /// `None` picks the optimizer's default.
    pub lr: Option<f64>,
    /// Global gradient-norm clip. Off by default.
    pub clip_norm: Option<f64>,
    /// Stop after this many optimizer steps in total.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            seed: 0,
            shuffle: true,
            reg: RegularizerConfig::default(),
            eval_every: 1,
            optimizer: OptimizerKind::Adam,
            lr: None,
            clip_norm: None,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("epochs, batch_size and eval_every must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip norm must be positive, got {c}")));
            }
        }
        self.reg.validate()
    }

    fn optimizer(&self) -> Result<OptimizerState> {
        OptimizerState::new(self.optimizer, self.lr.unwrap_or(self.optimizer.default_lr()))
    }
}

/// One line of the training log. Terms that do not apply are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub task_loss: f64,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub entropy: Option<f64>,
    pub metric: Option<f64>,
    pub mean_mask: Option<f64>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6e}"))
}

impl fmt::Display for EpochRecord {
    /// `epoch task_loss l1 l2 entropy metric mean_mask`, tab separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6e}\t{}\t{}\t{}\t{}\t{}",
            self.epoch,
            self.task_loss,
            opt_field(self.l1),
            opt_field(self.l2),
            opt_field(self.entropy),
            opt_field(self.metric),
            opt_field(self.mean_mask)
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub records: Vec<EpochRecord>,
    /// Free-form lines such as the clipping setting.
    pub notes: Vec<String>,
    pub steps: usize,
}

impl TrainingLog {
    pub const HEADER: &'static str = "epoch\ttask_loss\tl1\tl2\tentropy\tmetric\tmean_mask";

    /// Header, `#`-prefixed notes, then one record per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for n in &self.notes {
            s.push_str("# ");
            s.push_str(n);
            s.push('\n');
        }
        for r in &self.records {
            s.push_str(&r.to_string());
            s.push('\n');
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// Epoch order in batches; a trailing single example joins the previous
/// batch so batch statistics always see at least two rows.
fn epoch_batches(rng: &mut ChaCha8Rng, n: usize, cfg: &TrainConfig) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if cfg.shuffle {
        order.shuffle(rng);
    }
    let mut out: Vec<Vec<usize>> = order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Cross-entropy for class targets, mean squared error for real targets.
pub fn task_loss<'t>(outputs: Var<'t>, targets: &Targets, idx: &[usize]) -> Result<Var<'t>> {
    match targets {
        Targets::Classes(y) => {
            let labels: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            cross_entropy_loss(outputs, &labels)
        }
        Targets::Values(y) => {
            let target = Tensor::from_vec(&[idx.len()], idx.iter().map(|&i| y[i]).collect())?;
            let pred = outputs.reshape(&[idx.len()])?;
            mse_loss(pred, outputs.tape().constant(target))
        }
    }
}

fn check_finite(loss: f64, epoch: usize, batch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence { epoch, batch, loss })
    }
}

fn notes(cfg: &TrainConfig, opt: &OptimizerState) -> Vec<String> {
    let mut n = vec![format!("optimizer={} lr={:?}", opt.kind().as_str(), opt.lr())];
    if let Some(c) = cfg.clip_norm {
        n.push(format!("clip_norm={c:?}"));
    }
    n
}

fn wants_metric(cfg: &TrainConfig, epoch: usize, last: bool) -> bool {
    last || epoch.is_multiple_of(cfg.eval_every)
}

/// Trains `model` on the task loss alone. Epochs are 1-based in the log and
/// in divergence errors; batches are 0-based within their epoch.
pub fn train_base(model: &mut ModelGraph, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut opt = cfg.optimizer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog { notes: notes(cfg, &opt), ..Default::default() };
    model.zero_grads();
    model.set_mode(Mode::Train);
    let result = (|| {
        for epoch in 1..=cfg.epochs {
            let mut loss_sum = 0.0;
            let mut seen = 0usize;
            let mut stopped = false;
            for (b, idx) in epoch_batches(&mut rng, data.len(), cfg).into_iter().enumerate() {
                if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                    stopped = true;
                    break;
                }
                let batch = data.batch(&idx)?;
                let tape = Tape::new();
                let mut binding = Binding::new();
                let out = model.forward(&tape, batch.feed(&tape), &mut binding)?;
                let loss = task_loss(out, data.targets(), &idx)?;
                let lv = loss.value().item();
                check_finite(lv, epoch, b)?;
                let grads = tape.backward(loss)?;
                model.accumulate_grads(&binding, &grads);
                if let Some(c) = cfg.clip_norm {
                    clip_grad_norm(model, c);
                }
                opt.step(model)?;
                log.steps += 1;
                loss_sum += lv * idx.len() as f64;
                seen += idx.len();
            }
            if seen > 0 {
                let last = epoch == cfg.epochs || stopped;
                let metric = if wants_metric(cfg, epoch, last) {
                    Some(task_metric(&base_predictions(model, data)?, data.targets())?.value)
                } else {
                    None
                };
                log.records.push(EpochRecord {
                    epoch,
                    task_loss: loss_sum / seen as f64,
                    l1: None,
                    l2: None,
                    entropy: None,
                    metric,
                    mean_mask: None,
                });
            }
            if stopped {
                break;
            }
        }
        Ok(())
    })();
    model.set_mode(Mode::Infer);
    result.map(|_| log)
}

#[derive(Default)]
struct Sums {
    task: f64,
    l1: f64,
    l2: f64,
    entropy: f64,
    mask: f64,
    seen: usize,
}

/// Trains the explanation network on the masked task loss plus mask
/// regularizers. The base model is re-frozen first and only ever run in
/// infer mode.
pub fn train_explainer(mm: &mut MaskedModel, data: &LabeledDataset, cfg: &TrainConfig) -> Result<TrainingLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Empty);
    }
    mm.freeze_base();
    let mut opt = cfg.optimizer()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainingLog { notes: notes(cfg, &opt), ..Default::default() };
    mm.explainer_mut().zero_grads();
    mm.explainer_mut().set_mode(Mode::Train);
    let result = (|| {
        for epoch in 1..=cfg.epochs {
            let mut s = Sums::default();
            let mut stopped = false;
            for (b, idx) in epoch_batches(&mut rng, data.len(), cfg).into_iter().enumerate() {
                if cfg.max_steps.is_some_and(|m| log.steps >= m) {
                    stopped = true;
                    break;
                }
                let batch = data.batch(&idx)?;
                let tape = Tape::new();
                let out = mm.masked_forward(&tape, batch.feed(&tape))?;
                let task = task_loss(out.output, data.targets(), &idx)?;
                let terms = total_objective(task, out.mask, &cfg.reg)?;
                let total = terms.total.value().item();
                check_finite(total, epoch, b)?;
                let grads = tape.backward(terms.total)?;
                let explainer = mm.explainer_mut();
                explainer.accumulate_grads(&out.binding, &grads);
                if let Some(c) = cfg.clip_norm {
                    clip_grad_norm(explainer, c);
                }
                opt.step(explainer)?;
                log.steps += 1;
                let w = idx.len() as f64;
                let val = |v: Option<Var<'_>>| v.map_or(0.0, |v| v.value().item());
                s.task += terms.task.value().item() * w;
                s.l1 += val(terms.l1) * w;
                s.l2 += val(terms.l2) * w;
                s.entropy += val(terms.entropy) * w;
                let m = out.mask.value();
                s.mask += m.data().iter().sum::<f64>() / m.len() as f64 * w;
                s.seen += idx.len();
            }
            if s.seen > 0 {
                let n = s.seen as f64;
                let last = epoch == cfg.epochs || stopped;
                let metric = if wants_metric(cfg, epoch, last) {
                    let (outs, _) = masked_predictions(mm, data)?;
                    Some(task_metric(&outs, data.targets())?.value)
                } else {
                    None
                };
                log.records.push(EpochRecord {
                    epoch,
                    task_loss: s.task / n,
                    l1: Some(s.l1 / n),
                    l2: Some(s.l2 / n),
                    entropy: Some(s.entropy / n),
                    metric,
                    mean_mask: Some(s.mask / n),
                });
            }
            if stopped {
                break;
            }
        }
        Ok(())
    })();
    mm.explainer_mut().set_mode(Mode::Infer);
    result.map(|_| log)
}
