//! Accuracy, RMSE, mask sparsity and ground-truth attribution metrics.

use crate::error::{Error, Result};
use crate::mask::MaskedModel;
use crate::nn::ModelGraph;
use crate::tasks::{LabeledDataset, Targets};
use crate::tensor::Tensor;

/// Examples per forward pass when predicting a whole dataset.
pub const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MetricKind {
    /// Fraction of correct argmax predictions; higher is better.
    Accuracy,
    /// Root mean squared error; lower is better.
    Rmse,
}

impl MetricKind {
    pub fn of(targets: &Targets) -> MetricKind {
        match targets {
            Targets::Classes(_) => MetricKind::Accuracy,
            Targets::Values(_) => MetricKind::Rmse,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric {
    pub kind: MetricKind,
    pub value: f64,
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy of `[N, C]` logits against class labels.
pub fn accuracy(outputs: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::Empty);
    }
    if outputs.rank() != 2 || outputs.shape()[0] != labels.len() {
        return Err(Error::size(format!("{:?} outputs for {} labels", outputs.shape(), labels.len())));
    }
    let c = outputs.shape()[1];
    let hits = outputs.data().chunks(c).zip(labels).filter(|(row, &y)| argmax(row) == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// RMSE of `[N]` or `[N, 1]` predictions.
pub fn rmse(outputs: &Tensor, targets: &[f64]) -> Result<f64> {
    if targets.is_empty() {
        return Err(Error::Empty);
    }
    if outputs.len() != targets.len() || outputs.shape()[0] != targets.len() {
        return Err(Error::size(format!("{:?} predictions for {} targets", outputs.shape(), targets.len())));
    }
    let sse: f64 = outputs.data().iter().zip(targets).map(|(p, y)| (p - y) * (p - y)).sum();
    Ok((sse / targets.len() as f64).sqrt())
}

/// The dataset's natural metric for `outputs`.
pub fn task_metric(outputs: &Tensor, targets: &Targets) -> Result<Metric> {
    let kind = MetricKind::of(targets);
    let value = match targets {
        Targets::Classes(y) => accuracy(outputs, y)?,
        Targets::Values(y) => rmse(outputs, y)?,
    };
    Ok(Metric { kind, value })
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_BATCH).map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

fn concat_rows(parts: Vec<Tensor>) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::Empty)?;
    let mut shape = first.shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    Tensor::from_vec(&shape, parts.into_iter().flat_map(Tensor::into_data).collect())
}

/// Infer-mode base-model outputs for every example.
pub fn base_predictions(model: &ModelGraph, data: &LabeledDataset) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    concat_rows(chunks(data.len()).map(|idx| model.predict(&data.batch(&idx)?)).collect::<Result<_>>()?)
}

/// Infer-mode masked outputs and masks for every example.
pub fn masked_predictions(mm: &mut MaskedModel, data: &LabeledDataset) -> Result<(Tensor, Tensor)> {
    if data.is_empty() {
        return Err(Error::Empty);
    }
    let mut outs = Vec::new();
    let mut masks = Vec::new();
    for idx in chunks(data.len()) {
        let (o, m) = mm.predict(&data.batch(&idx)?)?;
        outs.push(o);
        masks.push(m);
    }
    Ok((concat_rows(outs)?, concat_rows(masks)?))
}

pub fn classification_accuracy(model: &ModelGraph, data: &LabeledDataset) -> Result<f64> {
    match data.targets() {
        Targets::Classes(y) => accuracy(&base_predictions(model, data)?, y),
        Targets::Values(_) => Err(Error::Config("accuracy needs class targets".into())),
    }
}

pub fn regression_rmse(model: &ModelGraph, data: &LabeledDataset) -> Result<f64> {
    match data.targets() {
        Targets::Values(y) => rmse(&base_predictions(model, data)?, y),
        Targets::Classes(_) => Err(Error::Config("RMSE needs real-valued targets".into())),
    }
}

/// `(mean value, fraction strictly above 0.5)` over every mask entry.
pub fn mask_sparsity_stats(masks: &Tensor) -> (f64, f64) {
    let n = masks.len() as f64;
    let mean = masks.data().iter().sum::<f64>() / n;
    let l0 = masks.data().iter().filter(|&&v| v > 0.5).count() as f64 / n;
    (mean, l0)
}

/// Positions of the `k` largest values, ties to the lowest index.
pub fn topk_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    // stable sort keeps lower indices first among equal values
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx.truncate(k);
    idx
}

fn per_example<F>(masks: &Tensor, relevance: &[Vec<usize>], k: usize, score: F) -> Result<f64>
where
    F: Fn(&[usize], &[usize]) -> f64,
{
    if relevance.is_empty() {
        return Err(Error::Empty);
    }
    let n = masks.shape()[0];
    if n != relevance.len() {
        return Err(Error::size(format!("{n} masks for {} relevance sets", relevance.len())));
    }
    let len = masks.len() / n;
    if k == 0 || k > len {
        return Err(Error::Config(format!("k = {k} must lie in 1..={len}")));
    }
    if relevance.iter().any(Vec::is_empty) {
        return Err(Error::Config("every relevance set must be nonempty".into()));
    }
    let total: f64 = masks.data().chunks(len).zip(relevance).map(|(row, rel)| score(&topk_indices(row, k), rel)).sum();
    Ok(total / n as f64)
}

/// Fraction of examples where at least one of the `k` highest mask
/// positions is ground-truth relevant.
pub fn topk_attribution_accuracy(masks: &Tensor, relevance: &[Vec<usize>], k: usize) -> Result<f64> {
    per_example(masks, relevance, k, |top, rel| f64::from(u8::from(top.iter().any(|i| rel.contains(i)))))
}

/// Mean of `|top-k ∩ relevant| / min(k, |relevant|)`.
pub fn topk_overlap_fraction(masks: &Tensor, relevance: &[Vec<usize>], k: usize) -> Result<f64> {
    per_example(masks, relevance, k, |top, rel| {
        top.iter().filter(|i| rel.contains(i)).count() as f64 / k.min(rel.len()) as f64
    })
}

/// Signed change in the metric under masking: `masked − base` for accuracy,
/// `base − masked` for RMSE, so positive always means improvement.
pub fn fidelity_delta(base: Metric, masked: Metric) -> Result<f64> {
    if base.kind != masked.kind {
        return Err(Error::Config(format!("cannot compare {:?} with {:?}", base.kind, masked.kind)));
    }
    Ok(match base.kind {
        MetricKind::Accuracy => masked.value - base.value,
        MetricKind::Rmse => base.value - masked.value,
    })
}

/// Summary of one explainer evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub base_metric: f64,
    pub masked_metric: f64,
    pub fidelity_delta: f64,
    pub mean_mask: f64,
    pub mask_l0_at_half: f64,
    pub topk_attr_acc: f64,
    /// Stricter diagnostic companion of `topk_attr_acc`.
    pub topk_overlap_frac: f64,
    pub k: usize,
    pub n_examples: usize,
}

/// Runs base and masked models over `data` and scores the masks against
/// its relevance sets.
pub fn evaluate(base: &ModelGraph, mm: &mut MaskedModel, data: &LabeledDataset, k: usize) -> Result<MetricsReport> {
    let base_m = task_metric(&base_predictions(base, data)?, data.targets())?;
    let (outs, masks) = masked_predictions(mm, data)?;
    let masked_m = task_metric(&outs, data.targets())?;
    let (mean_mask, l0) = mask_sparsity_stats(&masks);
    Ok(MetricsReport {
        base_metric: base_m.value,
        masked_metric: masked_m.value,
        fidelity_delta: fidelity_delta(base_m, masked_m)?,
        mean_mask,
        mask_l0_at_half: l0,
        topk_attr_acc: topk_attribution_accuracy(&masks, data.relevance(), k)?,
        topk_overlap_frac: topk_overlap_fraction(&masks, data.relevance(), k)?,
        k,
        n_examples: data.len(),
    })
}
