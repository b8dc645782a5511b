//! Task losses, mask regularizers, and the explainer objective.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::Var;
use crate::error::{Error, Result};

/// How the entropy of a mask is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EntropyKind {
    /// Normalize the mask to a distribution `p = m / Σm` and take its
    /// Shannon entropy. Low for masks concentrated on few positions.
    #[default]
    Distribution,
    /// Sum of per-element binary entropies. Low for masks near 0 or 1.
    Bernoulli,
}

impl EntropyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EntropyKind::Distribution => "distribution",
            EntropyKind::Bernoulli => "bernoulli",
        }
    }
}

impl FromStr for EntropyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "distribution" => Ok(EntropyKind::Distribution),
            "bernoulli" => Ok(EntropyKind::Bernoulli),
            other => Err(Error::Config(format!("unknown entropy kind {other:?}"))),
        }
    }
}

/// Coefficients of the three mask regularizers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegularizerConfig {
    pub l1: f64,
    pub l2: f64,
    pub entropy: f64,
    pub entropy_kind: EntropyKind,
}

impl RegularizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("entropy", self.entropy)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} coefficient must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for RegularizerConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "l1={:?},l2={:?},entropy={:?},entropy_kind={}",
            self.l1,
            self.l2,
            self.entropy,
            self.entropy_kind.as_str()
        )
    }
}

/// Parses `l1=…,l2=…,entropy=…,entropy_kind=…`; omitted keys keep their
/// defaults.
impl FromStr for RegularizerConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut cfg = RegularizerConfig::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) =
                part.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value in {part:?}")))?;
            let num = || v.parse::<f64>().map_err(|_| Error::Config(format!("{k}: {v:?} is not a number")));
            match k.trim() {
                "l1" => cfg.l1 = num()?,
                "l2" => cfg.l2 = num()?,
                "entropy" => cfg.entropy = num()?,
                "entropy_kind" => cfg.entropy_kind = v.trim().parse()?,
                other => return Err(Error::Config(format!("unknown regularizer {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Mean over rows of `-log softmax(logits)[label]`.
pub fn cross_entropy_loss<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    logits.cross_entropy(labels)
}

/// Mean squared error between equal-length `pred` and `target`.
pub fn mse_loss<'t>(pred: Var<'t>, target: Var<'t>) -> Result<Var<'t>> {
    if pred.value().len() != target.value().len() {
        return Err(Error::size(format!(
            "mse of {} predictions against {} targets",
            pred.value().len(),
            target.value().len()
        )));
    }
    let t = if pred.shape() == target.shape() { target } else { target.reshape(&pred.shape())? };
    Ok(pred.sub(t)?.square().mean_all())
}

fn check_coeff(coeff: f64) -> Result<()> {
    if !coeff.is_finite() || coeff < 0.0 {
        return Err(Error::Config(format!("penalty coefficient must be finite and nonnegative, got {coeff}")));
    }
    Ok(())
}

/// `coeff · Σ|m|`
pub fn l1_penalty(m: Var<'_>, coeff: f64) -> Result<Var<'_>> {
    check_coeff(coeff)?;
    Ok(m.abs().sum_all().scale(coeff))
}

/// `coeff · Σ m²`
pub fn l2_penalty(m: Var<'_>, coeff: f64) -> Result<Var<'_>> {
    check_coeff(coeff)?;
    Ok(m.square().sum_all().scale(coeff))
}

/// Entropy of a single mask, scaled by `coeff`.
pub fn entropy_penalty(m: Var<'_>, coeff: f64, kind: EntropyKind) -> Result<Var<'_>> {
    let n = m.value().len();
    let flat = m.reshape(&[1, n])?;
    Ok(batch_entropy(flat, kind)?.sum_all().scale(coeff))
}

/// Per-example entropies of `[N, L]` masks, shape `[N]`.
fn batch_entropy(m: Var<'_>, kind: EntropyKind) -> Result<Var<'_>> {
    let v = m.value();
    if let Some(x) = v.data().iter().find(|&&x| x < 0.0 || x.is_nan()) {
        return Err(Error::Domain(format!("entropy of a mask with negative value {x}")));
    }
    let len = v.shape()[1];
    match kind {
        EntropyKind::Distribution => {
            let totals = m.sum(&[1])?;
            if let Some(row) = totals.value().data().iter().position(|&s| s <= 0.0) {
                return Err(Error::DegenerateMask(format!("mask {row} sums to zero")));
            }
            let p = m.div(totals.expand_axis(1, len)?)?;
            Ok(p.xlogx()?.sum(&[1])?.neg())
        }
        EntropyKind::Bernoulli => {
            if let Some(x) = v.data().iter().find(|&&x| x > 1.0) {
                return Err(Error::Domain(format!("bernoulli entropy of mask value {x} > 1")));
            }
            let inv = m.neg().offset(1.0);
            let h = m.xlogx()?.add(inv.xlogx()?)?;
            Ok(h.sum(&[1])?.neg())
        }
    }
}

/// The individual terms of one objective evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveTerms<'t> {
    pub total: Var<'t>,
    pub task: Var<'t>,
    pub l1: Option<Var<'t>>,
    pub l2: Option<Var<'t>>,
    pub entropy: Option<Var<'t>>,
}

/// `task_loss + l1 + l2 + entropy` for a batch of masks whose leading axis
/// is the batch. Each penalty is computed per example and averaged over the
/// batch. Zero coefficients contribute nothing (not even a tape node).
pub fn total_objective<'t>(task_loss: Var<'t>, mask: Var<'t>, reg: &RegularizerConfig) -> Result<ObjectiveTerms<'t>> {
    reg.validate()?;
    let shape = mask.shape();
    let n = shape[0];
    let len: usize = shape[1..].iter().product::<usize>().max(1);
    let flat = mask.reshape(&[n, len])?;
    let inv_n = 1.0 / n as f64;
    let mut total = task_loss;
    let mut terms = ObjectiveTerms { total, task: task_loss, l1: None, l2: None, entropy: None };
    if reg.l1 > 0.0 {
        let t = flat.abs().sum_all().scale(reg.l1 * inv_n);
        total = total.add(t)?;
        terms.l1 = Some(t);
    }
    if reg.l2 > 0.0 {
        let t = flat.square().sum_all().scale(reg.l2 * inv_n);
        total = total.add(t)?;
        terms.l2 = Some(t);
    }
    if reg.entropy > 0.0 {
        let t = batch_entropy(flat, reg.entropy_kind)?.sum_all().scale(reg.entropy * inv_n);
        total = total.add(t)?;
        terms.entropy = Some(t);
    }
    terms.total = total;
    Ok(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::from_vec(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let tape = Tape::new();
        let p = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert_eq!(mse_loss(p, p).unwrap().value().item(), 0.0);
        let p = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.constant(t(&[2], &[1.0, 1.0]));
        assert_eq!(mse_loss(p, y).unwrap().value().item(), 1.0);
        let y3 = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        assert!(matches!(mse_loss(p, y3), Err(Error::Size(_))));
    }

    #[test]
    fn mse_gradient_formula() {
        let tape = Tape::new();
        let p = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]), true);
        let y = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let g = tape.backward(mse_loss(p, y).unwrap()).unwrap();
        let got = g.get(p).unwrap();
        let want = [2.0 * (0.5 - 1.0) / 3.0, 2.0 * (-2.0) / 3.0, 2.0 * 1.0 / 3.0];
        for (a, b) in got.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn l1_l2_examples() {
        let tape = Tape::new();
        let m = tape.constant(t(&[2], &[0.5, 0.5]));
        assert!((l1_penalty(m, 1e-3).unwrap().value().item() - 1e-3).abs() < 1e-18);
        let z = tape.constant(Tensor::zeros(&[4]));
        assert_eq!(l1_penalty(z, 1e-3).unwrap().value().item(), 0.0);
        assert_eq!(l2_penalty(z, 1e-4).unwrap().value().item(), 0.0);
        let m2 = m.scale(2.0);
        assert!((l1_penalty(m2, 1e-3).unwrap().value().item() - 2e-3).abs() < 1e-18);
        let ones = tape.constant(Tensor::ones(&[2]));
        assert!((l2_penalty(ones, 1e-4).unwrap().value().item() - 2e-4).abs() < 1e-18);
        let mixed = tape.constant(t(&[3], &[0.3, -0.7, 1.1]));
        assert_eq!(
            l2_penalty(mixed, 1e-4).unwrap().value().item(),
            l2_penalty(mixed.neg(), 1e-4).unwrap().value().item()
        );
        assert!(l1_penalty(m, -1.0).is_err());
    }

    #[test]
    fn entropy_examples() {
        let tape = Tape::new();
        let u = tape.constant(Tensor::full(&[4], 0.3));
        let h = entropy_penalty(u, 1.0, EntropyKind::Distribution).unwrap().value().item();
        assert!((h - 4f64.ln()).abs() < 1e-12);
        let onehot = tape.constant(t(&[4], &[0.0, 1.0, 0.0, 0.0]));
        assert_eq!(entropy_penalty(onehot, 1.0, EntropyKind::Distribution).unwrap().value().item(), 0.0);
        assert_eq!(entropy_penalty(onehot, 1.0, EntropyKind::Bernoulli).unwrap().value().item(), 0.0);
        let half = tape.constant(Tensor::full(&[5], 0.5));
        let h = entropy_penalty(half, 1.0, EntropyKind::Bernoulli).unwrap().value().item();
        assert!((h - 5.0 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn entropy_errors() {
        let tape = Tape::new();
        let neg = tape.constant(t(&[2], &[0.5, -0.1]));
        assert!(matches!(entropy_penalty(neg, 1.0, EntropyKind::Distribution), Err(Error::Domain(_))));
        let z = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(entropy_penalty(z, 1.0, EntropyKind::Distribution), Err(Error::DegenerateMask(_))));
    }

    #[test]
    fn objective_composition() {
        let tape = Tape::new();
        let task = tape.constant(Tensor::scalar(0.7));
        let m = tape.constant(t(&[1, 2], &[1.0, 1.0]));
        let terms = total_objective(task, m, &RegularizerConfig::default()).unwrap();
        assert_eq!(terms.total.value().item(), 0.7);
        let zero = tape.constant(Tensor::scalar(0.0));
        let reg = RegularizerConfig { l2: 1e-4, ..Default::default() };
        let terms = total_objective(zero, m, &reg).unwrap();
        assert!((terms.total.value().item() - 2e-4).abs() < 1e-18);
    }

    #[test]
    fn regularizer_parsing() {
        let r: RegularizerConfig = "l1=1e-3,l2=1e-4,entropy=0.5,entropy_kind=bernoulli".parse().unwrap();
        assert_eq!(r, RegularizerConfig { l1: 1e-3, l2: 1e-4, entropy: 0.5, entropy_kind: EntropyKind::Bernoulli });
        assert_eq!(r.to_string().parse::<RegularizerConfig>().unwrap(), r);
        assert!("l1=-1".parse::<RegularizerConfig>().is_err());
        assert!("tv=1".parse::<RegularizerConfig>().is_err());
    }
}
